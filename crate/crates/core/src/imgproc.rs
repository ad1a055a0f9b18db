//! Image math shared by the losses, the data synthesizer and the metrics.
//!
//! Images are `H × W × C` arrays of `f64` in normalized linear units. All
//! functions here are pure and deterministic.

use ndarray::{s, Array2, Array3, ArrayView3, Axis, Zip};

use crate::error::{ensure, Result};

/// Default dark-channel neighborhood size.
pub const DEFAULT_DARK_PATCH: usize = 35;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Array3<f64>,
}

impl Image {
    /// Wraps an `H × W × C` array. Values must be finite and `C` must be 1 or 3.
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let c = data.dim().2;
        ensure!(c == 1 || c == 3, "image must have 1 or 3 channels, got {c}");
        ensure!(data.iter().all(|v| v.is_finite()), "image contains non-finite values");
        Ok(Image { data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(channels == 1 || channels == 3);
        Image {
            data: Array3::from_elem((height, width, channels), value),
        }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl FnMut((usize, usize, usize)) -> f64) -> Self {
        assert!(channels == 1 || channels == 3);
        Image {
            data: Array3::from_shape_fn((height, width, channels), f),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn view(&self) -> ArrayView3<'_, f64> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array3<f64> {
        self.data
    }

    pub fn mean(&self) -> f64 {
        self.data.mean().unwrap_or(0.0)
    }

    pub fn clamped(mut self) -> Self {
        self.data.mapv_inplace(clamp_unit);
        self
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        ensure!(
            top + height <= self.height() && left + width <= self.width(),
            "crop window {height}x{width} at ({top},{left}) exceeds {}x{} image",
            self.height(),
            self.width()
        );
        Ok(Image {
            data: self
                .data
                .slice(s![top..top + height, left..left + width, ..])
                .to_owned(),
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image {
            data: self.data.slice(s![.., ..;-1, ..]).to_owned(),
        }
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        ensure!(
            self.dim() == other.dim(),
            "shape mismatch: {:?} vs {:?}",
            self.dim(),
            other.dim()
        );
        Ok(())
    }
}

#[inline]
pub(crate) fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Horizontal and vertical Sobel responses, same shape as the source.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    pub horizontal: Array3<f64>,
    pub vertical: Array3<f64>,
}

/// Dark channel map together with the flat `(y, x, c)` source index each
/// output pixel took its value from.
#[derive(Debug, Clone)]
pub struct DarkChannel {
    pub map: Array2<f64>,
    pub argmin: Array2<(usize, usize, usize)>,
}

fn check_patch(patch: usize) -> Result<()> {
    ensure!(
        patch >= 1 && patch % 2 == 1,
        "dark channel patch must be odd and positive, got {patch}"
    );
    Ok(())
}

/// Minimum over the channels and a `patch × patch` neighborhood (clipped at
/// the borders) of every pixel.
pub fn dark_channel(image: &Image, patch: usize) -> Result<Array2<f64>> {
    Ok(dark_channel_with_argmin(image, patch)?.map)
}

/// Dark channel plus the location of the minimum that produced each value.
///
/// Ties go to the first minimum in scan order: lowest row, then lowest
/// column, then lowest channel. The min filter is separable over the
/// rectangular window, so it runs as a row pass followed by a column pass.
pub fn dark_channel_with_argmin(image: &Image, patch: usize) -> Result<DarkChannel> {
    check_patch(patch)?;
    let (h, w, c) = image.dim();
    let r = patch / 2;
    let data = image.data();

    let mut chan_min = Array2::<f64>::zeros((h, w));
    let mut chan_arg = Array2::<usize>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut best = data[[y, x, 0]];
            let mut arg = 0;
            for ch in 1..c {
                let v = data[[y, x, ch]];
                if v < best {
                    best = v;
                    arg = ch;
                }
            }
            chan_min[[y, x]] = best;
            chan_arg[[y, x]] = arg;
        }
    }

    let mut row_min = Array2::<f64>::zeros((h, w));
    let mut row_arg = Array2::<usize>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut best = chan_min[[y, lo]];
            let mut arg = lo;
            for xs in lo + 1..=hi {
                let v = chan_min[[y, xs]];
                if v < best {
                    best = v;
                    arg = xs;
                }
            }
            row_min[[y, x]] = best;
            row_arg[[y, x]] = arg;
        }
    }

    let mut map = Array2::<f64>::zeros((h, w));
    let mut argmin = Array2::from_elem((h, w), (0, 0, 0));
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let mut best = row_min[[lo, x]];
            let mut arg = lo;
            for ys in lo + 1..=hi {
                let v = row_min[[ys, x]];
                if v < best {
                    best = v;
                    arg = ys;
                }
            }
            let sx = row_arg[[arg, x]];
            map[[y, x]] = best;
            argmin[[y, x]] = (arg, sx, chan_arg[[arg, sx]]);
        }
    }
    Ok(DarkChannel { map, argmin })
}

const SOBEL_H: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_V: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

fn correlate3(src: ArrayView3<f64>, kernel: &[[f64; 3]; 3]) -> Array3<f64> {
    let (h, w, c) = src.dim();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for (kx, k) in row.iter().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        if *k == 0.0 || sx < 0 || sx >= w as isize {
                            continue;
                        }
                        acc += k * src[[sy as usize, sx as usize, ch]];
                    }
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    out
}

fn correlate3_adjoint(grad: ArrayView3<f64>, kernel: &[[f64; 3]; 3], out: &mut Array3<f64>) {
    let (h, w, c) = grad.dim();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let g = grad[[y, x, ch]];
                if g == 0.0 {
                    continue;
                }
                for (ky, row) in kernel.iter().enumerate() {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for (kx, k) in row.iter().enumerate() {
                        let sx = x as isize + kx as isize - 1;
                        if *k == 0.0 || sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[[sy as usize, sx as usize, ch]] += k * g;
                    }
                }
            }
        }
    }
}

/// Per-channel 3×3 Sobel responses with zero padding.
pub fn sobel_gradients(image: &Image) -> Result<GradientPair> {
    let (h, w, _) = image.dim();
    ensure!(h >= 3 && w >= 3, "sobel needs at least 3x3, got {h}x{w}");
    Ok(GradientPair {
        horizontal: correlate3(image.view(), &SOBEL_H),
        vertical: correlate3(image.view(), &SOBEL_V),
    })
}

/// Transpose of [`sobel_gradients`]: maps upstream gradients on the two
/// responses back onto the source image.
pub fn sobel_adjoint(horizontal: ArrayView3<f64>, vertical: ArrayView3<f64>) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros(horizontal.dim());
    correlate3_adjoint(horizontal, &SOBEL_H, &mut out);
    correlate3_adjoint(vertical, &SOBEL_V, &mut out);
    out
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let mut acc = 0.0;
    Zip::from(a.data()).and(b.data()).for_each(|x, y| {
        let d = x - y;
        acc += d * d;
    });
    Ok(acc / a.data().len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let err = mse(a, b)?;
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / err).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(src: &Array2<f64>, win: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = src.dim();
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            rows[[y, x]] = win.iter().enumerate().map(|(k, c)| c * src[[y, x + k]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            out[[y, x]] = win.iter().enumerate().map(|(k, c)| c * rows[[y + k, x]]).sum();
        }
    }
    out
}

/// Mean structural similarity: 11×11 Gaussian window (σ = 1.5), valid
/// windows only, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, c) = a.dim();
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
    );
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let x = a.data().index_axis(Axis(2), ch).to_owned();
        let y = b.data().index_axis(Axis(2), ch).to_owned();
        let mu_x = filter_valid(&x, &win);
        let mu_y = filter_valid(&y, &win);
        let xx = filter_valid(&(&x * &x), &win);
        let yy = filter_valid(&(&y * &y), &win);
        let xy = filter_valid(&(&x * &y), &win);
        let mut sum = 0.0;
        Zip::from(&mu_x)
            .and(&mu_y)
            .and(&xx)
            .and(&yy)
            .and(&xy)
            .for_each(|&mx, &my, &sxx, &syy, &sxy| {
                let var_x = sxx - mx * mx;
                let var_y = syy - my * my;
                let cov = sxy - mx * my;
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
                sum += num / den;
            });
        total += sum / mu_x.len() as f64;
    }
    Ok(total / c as f64)
}

/// Multiplies every value by `factor` and clamps onto `[0, 1]`.
pub fn scale_exposure(image: &Image, factor: f64) -> Result<Image> {
    ensure!(
        factor > 0.0 && factor.is_finite(),
        "exposure factor must be positive, got {factor}"
    );
    Ok(Image {
        data: image.data.mapv(|v| clamp_unit(v * factor)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_| rng.gen())
    }

    fn brute_dark(image: &Image, patch: usize) -> Array2<f64> {
        let (h, w, c) = image.dim();
        let r = (patch / 2) as isize;
        Array2::from_shape_fn((h, w), |(y, x)| {
            let mut m = f64::INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        m = m.min(image.data()[[sy as usize, sx as usize, ch]]);
                    }
                }
            }
            m
        })
    }

    #[test]
    fn dark_channel_of_zeros_and_constants() {
        let z = Image::zeros(8, 8, 3);
        assert!(dark_channel(&z, 3).unwrap().iter().all(|&v| v == 0.0));
        let c = Image::filled(9, 7, 3, 0.42);
        for patch in [1, 3, 5, 35] {
            assert!(dark_channel(&c, patch).unwrap().iter().all(|&v| v == 0.42));
        }
    }

    #[test]
    fn dark_channel_matches_exhaustive_scan() {
        for seed in 0..5 {
            let img = random_image(16, 16, 3, seed);
            assert_eq!(dark_channel(&img, 5).unwrap(), brute_dark(&img, 5));
        }
    }

    #[test]
    fn dark_channel_rejects_even_patch() {
        let img = Image::zeros(4, 4, 3);
        assert!(dark_channel(&img, 4).is_err());
        assert!(dark_channel(&img, 0).is_err());
    }

    #[test]
    fn dark_channel_ties_route_to_first_in_scan_order() {
        let img = Image::filled(5, 5, 3, 0.3);
        let dc = dark_channel_with_argmin(&img, 3).unwrap();
        assert_eq!(dc.argmin[[2, 2]], (1, 1, 0));
        assert_eq!(dc.argmin[[0, 0]], (0, 0, 0));
    }

    #[test]
    fn sobel_of_ramp() {
        let w = 10;
        let img = Image::from_fn(6, w, 1, |(_, x, _)| x as f64 / w as f64);
        let g = sobel_gradients(&img).unwrap();
        for y in 1..5 {
            for x in 1..w - 1 {
                assert!((g.horizontal[[y, x, 0]] - 8.0 / w as f64).abs() < 1e-12);
                assert!(g.vertical[[y, x, 0]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sobel_rejects_tiny_images() {
        assert!(sobel_gradients(&Image::zeros(2, 5, 3)).is_err());
    }

    #[test]
    fn sobel_adjoint_is_transpose() {
        let img = random_image(7, 9, 3, 11);
        let gh = random_image(7, 9, 3, 12).into_inner();
        let gv = random_image(7, 9, 3, 13).into_inner();
        let fwd = sobel_gradients(&img).unwrap();
        let lhs = (&fwd.horizontal * &gh).sum() + (&fwd.vertical * &gv).sum();
        let rhs = (img.data() * &sobel_adjoint(gh.view(), gv.view())).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn psnr_values() {
        let a = Image::zeros(4, 4, 3);
        let b = Image::filled(4, 4, 3, 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &Image::zeros(4, 5, 3)).is_err());
    }

    #[test]
    fn ssim_constant_pair() {
        let a = Image::zeros(12, 12, 3);
        let b = Image::filled(12, 12, 3, 1.0);
        let expected = SSIM_C1 / (1.0 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert!(ssim(&Image::zeros(10, 12, 3), &Image::zeros(10, 12, 3)).is_err());
    }

    #[test]
    fn exposure_scaling() {
        let img = Image::filled(3, 3, 3, 0.5);
        assert_eq!(scale_exposure(&img, 1.0).unwrap(), img);
        let s = scale_exposure(&img, 0.4).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let s = scale_exposure(&Image::filled(3, 3, 3, 0.8), 2.0).unwrap();
        assert!(s.data().iter().all(|&v| v == 1.0));
        assert!(scale_exposure(&img, 0.0).is_err());
        assert!(scale_exposure(&img, -1.0).is_err());
    }
}
