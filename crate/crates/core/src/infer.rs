//! Full-image inference: exposure compensation, reflect padding to the
//! network's size multiple, optional overlapping tiles.

use ndarray::{s, Array3};

use crate::datagen::compensate_exposure;
use crate::error::{ensure, Result};
use crate::imgproc::Image;
use crate::nets::{Networks, WeightStore};

pub const TILE_OVERLAP: usize = 32;

/// Mirror index without repeating the edge sample.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Pads bottom and right by reflection up to `(height, width)`.
pub fn reflect_pad(image: &Image, height: usize, width: usize) -> Result<Image> {
    let (h, w, c) = image.dim();
    ensure!(height >= h && width >= w, "cannot pad {h}x{w} down to {height}x{width}");
    let d = image.data();
    let out = Array3::from_shape_fn((height, width, c), |(y, x, ch)| {
        d[[reflect(y as isize, h), reflect(x as isize, w), ch]]
    });
    Image::new(out)
}

pub fn round_up(n: usize, multiple: usize) -> usize {
    n.div_ceil(multiple) * multiple
}

/// Tile origins along one axis of length `len` covering it with `tile`-long
/// windows that overlap by at least `overlap`.
fn tile_starts(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut starts: Vec<usize> = (0..).map(|k| k * stride).take_while(|&s| s + tile < len).collect();
    starts.push(len - tile);
    starts
}

/// Generator output for an exposure-compensated pair whose sides are
/// multiples of the network's size multiple.
fn run_tiled(
    nets: &Networks,
    store: &WeightStore,
    noisy: &Image,
    blurry: &Image,
    tile: Option<usize>,
) -> Result<Image> {
    let (h, w, _) = noisy.dim();
    let tile = match tile {
        Some(t) if t < h || t < w => t,
        _ => return nets.infer(store, noisy, blurry),
    };
    let m = nets.config.size_multiple();
    ensure!(
        tile % m == 0 && tile > TILE_OVERLAP,
        "tile size {tile} must be a multiple of {m} and exceed the {TILE_OVERLAP}-pixel overlap"
    );
    let mut acc = Array3::<f64>::zeros((h, w, 3));
    let mut weight = Array3::<f64>::zeros((h, w, 1));
    let (th, tw) = (tile.min(h), tile.min(w));
    for &y in &tile_starts(h, th, TILE_OVERLAP) {
        for &x in &tile_starts(w, tw, TILE_OVERLAP) {
            let out = nets.infer(store, &noisy.crop(y, x, th, tw)?, &blurry.crop(y, x, th, tw)?)?;
            acc.slice_mut(s![y..y + th, x..x + tw, ..])
                .zip_mut_with(out.data(), |a, b| *a += b);
            weight.slice_mut(s![y..y + th, x..x + tw, ..]).mapv_inplace(|v| v + 1.0);
        }
    }
    let out = Array3::from_shape_fn((h, w, 3), |(y, x, c)| acc[[y, x, c]] / weight[[y, x, 0]]);
    Image::new(out)
}

/// Restores a raw noisy/blurry pair of any size. The noisy capture is
/// rescaled by the estimated exposure ratio, both are reflect-padded to the
/// network's size multiple, and the result is cropped back.
pub fn restore_pair(
    nets: &Networks,
    store: &WeightStore,
    noisy: &Image,
    blurry: &Image,
    tile: Option<usize>,
) -> Result<Image> {
    ensure!(
        noisy.dim() == blurry.dim(),
        "noisy {:?} and blurry {:?} differ in shape",
        noisy.dim(),
        blurry.dim()
    );
    ensure!(noisy.channels() == 3, "inputs must be RGB");
    let noisy = compensate_exposure(noisy, blurry)?;
    restore_compensated(nets, store, &noisy, blurry, tile)
}

/// [`restore_pair`] for a noisy capture that is already compensated.
pub fn restore_compensated(
    nets: &Networks,
    store: &WeightStore,
    noisy: &Image,
    blurry: &Image,
    tile: Option<usize>,
) -> Result<Image> {
    let (h, w, _) = noisy.dim();
    let m = nets.config.size_multiple();
    let (ph, pw) = (round_up(h, m), round_up(w, m));
    let out = if (ph, pw) == (h, w) {
        run_tiled(nets, store, noisy, blurry, tile)?
    } else {
        let n = reflect_pad(noisy, ph, pw)?;
        let b = reflect_pad(blurry, ph, pw)?;
        run_tiled(nets, store, &n, &b, tile)?.crop(0, 0, h, w)?
    };
    Ok(out.clamped())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_keeps_the_original_block() {
        let img = Image::from_fn(5, 3, 3, |(y, x, c)| (y * 3 + x + c) as f64 / 20.0);
        let p = reflect_pad(&img, 8, 8).unwrap();
        assert_eq!(p.crop(0, 0, 5, 3).unwrap(), img);
        assert_eq!(p.data()[[5, 0, 0]], img.data()[[3, 0, 0]]);
        assert_eq!(round_up(720, 64), 768);
        assert_eq!(round_up(1280, 64), 1280);
    }

    #[test]
    fn tiles_cover_the_axis() {
        assert_eq!(tile_starts(64, 64, 32), vec![0]);
        assert_eq!(tile_starts(160, 64, 32), vec![0, 32, 64, 96]);
        assert_eq!(tile_starts(100, 64, 32), vec![0, 32, 36]);
    }
}
