//! Slow, obviously-correct reference implementations shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use deblurpair_core::imgproc::Image;
use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> Image {
    Image::from_fn(h, w, c, |_| rng.gen::<f64>())
}

/// Minimum over channels and every in-bounds pixel of the neighborhood.
pub fn dark_channel_oracle(img: &Image, patch: usize) -> Array2<f64> {
    let (h, w, c) = img.dim();
    let r = (patch / 2) as isize;
    let d = img.data();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut best = f64::INFINITY;
            for yy in y - r..=y + r {
                for xx in x - r..=x + r {
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    for ch in 0..c {
                        best = best.min(d[[yy as usize, xx as usize, ch]]);
                    }
                }
            }
            out[[y as usize, x as usize]] = best;
        }
    }
    out
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];

fn correlate_zero_padded(img: &Image, k: &[[f64; 3]; 3]) -> Array3<f64> {
    let (h, w, c) = img.dim();
    let d = img.data();
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h as isize {
        for x in 0..w as isize {
            for ch in 0..c {
                let mut acc = 0.0;
                for (i, row) in k.iter().enumerate() {
                    for (j, kv) in row.iter().enumerate() {
                        let (yy, xx) = (y + i as isize - 1, x + j as isize - 1);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            acc += kv * d[[yy as usize, xx as usize, ch]];
                        }
                    }
                }
                out[[y as usize, x as usize, ch]] = acc;
            }
        }
    }
    out
}

/// (horizontal, vertical) Sobel responses by direct nested loops.
pub fn sobel_oracle(img: &Image) -> (Array3<f64>, Array3<f64>) {
    let mut ky = [[0.0; 3]; 3];
    for (i, row) in SOBEL_X.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            ky[j][i] = *v;
        }
    }
    (correlate_zero_padded(img, &SOBEL_X), correlate_zero_padded(img, &ky))
}

pub fn mae_oracle<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in a.into_iter().zip(b) {
        sum += (x - y).abs();
        n += 1;
    }
    sum / n as f64
}

pub fn content_oracle(a: &Image, b: &Image) -> f64 {
    mae_oracle(a.data().iter(), b.data().iter())
}

pub fn gradient_loss_oracle(a: &Image, b: &Image) -> f64 {
    let (ah, av) = sobel_oracle(a);
    let (bh, bv) = sobel_oracle(b);
    mae_oracle(ah.iter(), bh.iter()) + mae_oracle(av.iter(), bv.iter())
}

pub fn dark_channel_loss_oracle(a: &Image, b: &Image, patch: usize) -> f64 {
    let da = dark_channel_oracle(a, patch);
    let db = dark_channel_oracle(b, patch);
    let sq: f64 = da.iter().zip(db.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    (sq / da.len() as f64).sqrt()
}

pub fn psnr_oracle(a: &Image, b: &Image) -> f64 {
    let mut sq = 0.0;
    let mut n = 0.0;
    for (x, y) in a.data().iter().zip(b.data().iter()) {
        sq += (x - y) * (x - y);
        n += 1.0;
    }
    10.0 * (1.0 / (sq / n)).log10()
}

/// SSIM with an explicit 2-D Gaussian weight at every fully-inside window.
pub fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w, c) = a.dim();
    let size = 11usize;
    let sigma = 1.5f64;
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    win.iter_mut().flatten().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (da, db) = (a.data(), b.data());
    let mut acc = 0.0;
    for ch in 0..c {
        let mut per = 0.0;
        let mut count = 0.0;
        for y in 0..=h - size {
            for x in 0..=w - size {
                let (mut mx, mut my) = (0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        mx += win[i][j] * da[[y + i, x + j, ch]];
                        my += win[i][j] * db[[y + i, x + j, ch]];
                    }
                }
                let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
                for i in 0..size {
                    for j in 0..size {
                        let (p, q) = (da[[y + i, x + j, ch]] - mx, db[[y + i, x + j, ch]] - my);
                        vx += win[i][j] * p * p;
                        vy += win[i][j] * q * q;
                        cov += win[i][j] * p * q;
                    }
                }
                per += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1.0;
            }
        }
        acc += per / count;
    }
    acc / c as f64
}

/// Singular values of a row-major matrix from a full SVD, largest first.
pub fn singular_values(data: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let m = DMatrix::from_row_iterator(rows, cols, data.iter().map(|&v| v as f64));
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn top_singular_value(data: &[f32], rows: usize, cols: usize) -> f64 {
    singular_values(data, rows, cols)[0]
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One ConvLSTM update at a single spatial location. Only the centre tap of
/// each gate kernel sees data on a 1×1 grid. `w` is `[4·hc, cin + hc, k, k]`
/// row-major; gates are ordered input, forget, output, candidate.
pub fn lstm_cell_oracle(w: &[f32], b: &[f32], k: usize, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hc = h.len();
    let fan = x.len() + hc;
    let input: Vec<f64> = x.iter().chain(h).copied().collect();
    let centre = (k / 2) * k + k / 2;
    let gate = |g: usize, j: usize| -> f64 {
        let o = g * hc + j;
        let mut z = b[o] as f64;
        for (i, v) in input.iter().enumerate() {
            z += w[(o * fan + i) * k * k + centre] as f64 * v;
        }
        z
    };
    let mut h_new = vec![0.0; hc];
    let mut c_new = vec![0.0; hc];
    for j in 0..hc {
        let i_g = sigmoid(gate(0, j));
        let f_g = sigmoid(gate(1, j));
        let o_g = sigmoid(gate(2, j));
        let cand = gate(3, j).tanh();
        c_new[j] = f_g * c[j] + i_g * cand;
        h_new[j] = o_g * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// Textbook Adam on one scalar.
pub struct ScalarAdam {
    pub m: f64,
    pub v: f64,
    pub t: i32,
}

impl ScalarAdam {
    pub fn new() -> Self {
        ScalarAdam { m: 0.0, v: 0.0, t: 0 }
    }

    pub fn step(&mut self, p: f64, g: f64, lr: f64, b1: f64, b2: f64, eps: f64) -> f64 {
        self.t += 1;
        self.m = b1 * self.m + (1.0 - b1) * g;
        self.v = b2 * self.v + (1.0 - b2) * g * g;
        let mh = self.m / (1.0 - b1.powi(self.t));
        let vh = self.v / (1.0 - b2.powi(self.t));
        p - lr * mh / (vh.sqrt() + eps)
    }
}

/// Worst relative error between `analytic` and central differences of `f`
/// around `x`, and how many entries were skipped as subgradient ties.
/// `pieces` maps an input to the piecewise-linear quantities the loss is
/// built from (absolute differences, minima); an entry is a tie when their
/// forward and backward one-sided differences disagree.
pub fn finite_difference_check(
    f: impl Fn(&Image) -> f64,
    pieces: impl Fn(&Image) -> Vec<f64>,
    analytic: &Array3<f64>,
    x: &Image,
    step: f64,
) -> (f64, usize) {
    let base = pieces(x);
    let mut worst = 0.0f64;
    let mut skipped = 0;
    let mut probe = x.data().clone();
    for (idx, &a) in analytic.indexed_iter() {
        let orig = probe[idx];
        probe[idx] = orig + step;
        let up_img = Image::new(probe.clone()).unwrap();
        probe[idx] = orig - step;
        let down_img = Image::new(probe.clone()).unwrap();
        probe[idx] = orig;
        let (pu, pd) = (pieces(&up_img), pieces(&down_img));
        let tie = base
            .iter()
            .zip(&pu)
            .zip(&pd)
            .any(|((b, u), d)| ((u - b) - (b - d)).abs() > 1e-9);
        if tie {
            skipped += 1;
            continue;
        }
        let numeric = (f(&up_img) - f(&down_img)) / (2.0 * step);
        let denom = a.abs().max(numeric.abs());
        if denom > 1e-12 {
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    (worst, skipped)
}

/// Piecewise-linear building blocks of the three image losses.
pub fn content_pieces(x: &Image, target: &Image) -> Vec<f64> {
    x.data()
        .iter()
        .zip(target.data().iter())
        .map(|(a, b)| (a - b).abs())
        .collect()
}

pub fn gradient_pieces(x: &Image, target: &Image) -> Vec<f64> {
    let (xh, xv) = sobel_oracle(x);
    let (th, tv) = sobel_oracle(target);
    let h = xh.iter().zip(th.iter()).map(|(a, b)| (a - b).abs());
    let v = xv.iter().zip(tv.iter()).map(|(a, b)| (a - b).abs());
    h.chain(v).collect()
}

pub fn dark_channel_pieces(x: &Image, patch: usize) -> Vec<f64> {
    dark_channel_oracle(x, patch).into_iter().collect()
}
