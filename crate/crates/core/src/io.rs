//! 8-bit PNG reading and writing.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::imgproc::Image;

fn codec_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Reads any PNG as a 3-channel image in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let rgb = image::open(path).map_err(|e| codec_err(path, e))?.into_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    });
    Image::new(data)
}

/// Width and height from the file header, without decoding pixels.
pub fn png_dimensions(path: impl AsRef<Path>) -> Result<(usize, usize)> {
    let path = path.as_ref();
    let (w, h) = image::image_dimensions(path).map_err(|e| codec_err(path, e))?;
    Ok((h as usize, w as usize))
}

pub(crate) fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit PNG; values are clamped to `[0, 1]` and rounded.
pub fn write_png(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let (h, w, c) = image.dim();
    let d = image.data();
    let res = if c == 3 {
        ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([quantize(d[[y, x, 0]]), quantize(d[[y, x, 1]]), quantize(d[[y, x, 2]])])
        })
        .save(path)
    } else {
        ImageBuffer::<Luma<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(d[[y as usize, x as usize, 0]])])
        })
        .save(path)
    };
    res.map_err(|e| codec_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_levels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |(y, x, c)| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0);
        let p = dir.path().join("a/b.png");
        write_png(&p, &img).unwrap();
        assert_eq!(png_dimensions(&p).unwrap(), (5, 7));
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn quantize_clamps_and_rounds_half_up() {
        assert_eq!(quantize(-0.3), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(read_png("/nonexistent/x.png"), Err(Error::Io { .. })));
    }
}
