//! Synthesis of noisy/blurry/sharp triples from bursts of sharp frames.

mod dataset;
pub mod toy;

use std::collections::HashSet;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, invalid, Result};
use crate::imgproc::{clamp_unit, scale_exposure, Image};

pub use dataset::{
    build_dataset, load_triple, read_manifest, scene_seed, train_count, DatasetOptions, Manifest, ManifestEntry,
    SceneError, Split, TriplePaths, TripleRecord, MANIFEST_FILE,
};

/// Minimum frames in a burst: ground truth, one skipped, two averaged.
pub const MIN_BURST_FRAMES: usize = 4;

/// Guard against black noisy images in [`estimate_exposure_ratio`].
pub const EXPOSURE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BurstSequence {
    frames: Vec<Image>,
    scene_id: String,
}

impl BurstSequence {
    pub fn new(scene_id: impl Into<String>, frames: Vec<Image>) -> Result<Self> {
        ensure!(
            frames.len() >= MIN_BURST_FRAMES,
            "a burst needs at least {MIN_BURST_FRAMES} frames, got {}",
            frames.len()
        );
        let dim = frames[0].dim();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dim() != dim) {
            return Err(invalid!("frame {i} has shape {:?}, frame 0 has {dim:?}", f.dim()));
        }
        Ok(BurstSequence {
            frames,
            scene_id: scene_id.into(),
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frames_mut(&mut self) -> &mut [Image] {
        &mut self.frames
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub f_scale: f64,
    pub sigma_r: f64,
    pub shot_threshold: f64,
    pub n_frames_averaged: usize,
    pub rng_seed: u64,
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.f_scale > 0.0 && self.f_scale <= 1.0,
            "f_scale must lie in (0, 1], got {}",
            self.f_scale
        );
        ensure!(
            self.sigma_r >= 0.0 && self.sigma_r.is_finite(),
            "sigma_r must be non-negative, got {}",
            self.sigma_r
        );
        ensure!(self.shot_threshold.is_finite(), "shot_threshold must be finite");
        Ok(())
    }

    pub fn is_shot_noise(&self) -> bool {
        self.f_scale < self.shot_threshold
    }
}

/// Sampling intervals for the per-triple synthesis parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthRanges {
    pub fscale_min: f64,
    pub fscale_max: f64,
    pub sigma_r_min: f64,
    pub sigma_r_max: f64,
    pub shot_threshold: f64,
    pub window_min: usize,
    pub window_max: usize,
}

impl Default for SynthRanges {
    fn default() -> Self {
        SynthRanges {
            fscale_min: 0.3,
            fscale_max: 0.8,
            sigma_r_min: 0.05,
            sigma_r_max: 0.1,
            shot_threshold: 0.5,
            window_min: 9,
            window_max: 13,
        }
    }
}

impl SynthRanges {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            0.0 < self.fscale_min && self.fscale_min <= self.fscale_max && self.fscale_max <= 1.0,
            "f_scale range [{}, {}] must lie in (0, 1]",
            self.fscale_min,
            self.fscale_max
        );
        ensure!(
            0.0 <= self.sigma_r_min && self.sigma_r_min <= self.sigma_r_max,
            "sigma_r range [{}, {}] is invalid",
            self.sigma_r_min,
            self.sigma_r_max
        );
        ensure!(
            MIN_BURST_FRAMES <= self.window_min && self.window_min <= self.window_max,
            "window range [{}, {}] must start at {MIN_BURST_FRAMES} or more",
            self.window_min,
            self.window_max
        );
        Ok(())
    }

    /// Draws `f_scale`, `sigma_r` and a per-triple seed.
    pub fn sample(&self, n_frames_averaged: usize, rng: &mut impl Rng) -> SynthParams {
        SynthParams {
            f_scale: rng.gen_range(self.fscale_min..=self.fscale_max),
            sigma_r: rng.gen_range(self.sigma_r_min..=self.sigma_r_max),
            shot_threshold: self.shot_threshold,
            n_frames_averaged,
            rng_seed: rng.gen(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageTriple {
    pub noisy: Image,
    pub blurry: Image,
    pub sharp: Image,
    pub params: SynthParams,
    pub scene_id: String,
    pub index: usize,
}

/// Mean of the frames plus Gaussian readout noise with standard deviation
/// `sigma_r / sqrt(N)`, clamped to `[0, 1]`.
pub fn synth_blurry(frames: &[Image], sigma_r: f64, rng: &mut impl Rng) -> Result<Image> {
    ensure!(!frames.is_empty(), "synth_blurry needs at least one frame");
    ensure!(sigma_r >= 0.0 && sigma_r.is_finite(), "sigma_r must be non-negative");
    let dim = frames[0].dim();
    ensure!(frames.iter().all(|f| f.dim() == dim), "frames differ in shape");
    let n = frames.len() as f64;
    let mut sum = frames[0].data().clone();
    for f in &frames[1..] {
        sum += f.data();
    }
    let noise = Normal::new(0.0, sigma_r / n.sqrt()).map_err(|e| invalid!("{e}"))?;
    let data = sum.mapv(|v| clamp_unit(v / n + noise.sample(rng)));
    Image::new(data)
}

/// Number of distinct values over all pixels and channels.
pub fn unique_intensities(image: &Image) -> usize {
    image
        .data()
        .iter()
        .map(|v| if *v == 0.0 { 0u64 } else { v.to_bits() })
        .collect::<HashSet<_>>()
        .len()
}

/// Short-exposure capture of `sharp`: exposure scaling by `f_scale`, then
/// shot noise (below the threshold) or Gaussian readout noise, then clamping.
pub fn synth_noisy(sharp: &Image, params: &SynthParams, rng: &mut impl Rng) -> Result<Image> {
    params.validate()?;
    let scaled = scale_exposure(sharp, params.f_scale)?;
    let data = if params.is_shot_noise() {
        let sigma_s = unique_intensities(&scaled) as f64;
        scaled.data().mapv(|v| {
            let rate = sigma_s * v;
            let k = if rate > 0.0 {
                Poisson::new(rate).expect("positive finite rate").sample(rng)
            } else {
                0.0
            };
            clamp_unit(k / sigma_s)
        })
    } else {
        let noise = Normal::new(0.0, params.sigma_r).map_err(|e| invalid!("{e}"))?;
        scaled.data().mapv(|v| clamp_unit(v + noise.sample(rng)))
    };
    Image::new(data)
}

/// Frame 0 is the ground truth and the noisy source, frame 1 is dropped,
/// the rest are averaged into the blurry capture.
pub fn make_triple(seq: &BurstSequence, params: &SynthParams, index: usize, rng: &mut impl Rng) -> Result<ImageTriple> {
    let frames = seq.frames();
    ensure!(
        frames.len() >= MIN_BURST_FRAMES,
        "a burst needs at least {MIN_BURST_FRAMES} frames, got {}",
        frames.len()
    );
    let params = SynthParams {
        n_frames_averaged: frames.len() - 2,
        ..*params
    };
    let sharp = frames[0].clone();
    let noisy = synth_noisy(&sharp, &params, rng)?;
    let blurry = synth_blurry(&frames[2..], params.sigma_r, rng)?;
    Ok(ImageTriple {
        noisy,
        blurry,
        sharp,
        params,
        scene_id: seq.scene_id().to_string(),
        index,
    })
}

/// `mean(blurry) / max(mean(noisy), ε)`.
pub fn estimate_exposure_ratio(noisy: &Image, blurry: &Image) -> Result<f64> {
    ensure!(
        noisy.dim() == blurry.dim(),
        "noisy {:?} and blurry {:?} differ in shape",
        noisy.dim(),
        blurry.dim()
    );
    Ok(blurry.mean() / noisy.mean().max(EXPOSURE_EPS))
}

/// Rescales the noisy capture by the estimated exposure ratio.
pub fn compensate_exposure(noisy: &Image, blurry: &Image) -> Result<Image> {
    scale_exposure(noisy, estimate_exposure_ratio(noisy, blurry)?)
}

/// The same uniformly placed `size × size` window from all three images.
pub fn random_crop_triple(triple: &ImageTriple, size: usize, rng: &mut impl Rng) -> Result<ImageTriple> {
    let (h, w, _) = triple.sharp.dim();
    ensure!(
        size > 0 && h >= size && w >= size,
        "cannot crop {size}x{size} from {h}x{w}"
    );
    let top = rng.gen_range(0..=h - size);
    let left = rng.gen_range(0..=w - size);
    Ok(ImageTriple {
        noisy: triple.noisy.crop(top, left, size, size)?,
        blurry: triple.blurry.crop(top, left, size, size)?,
        sharp: triple.sharp.crop(top, left, size, size)?,
        ..triple.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(f_scale: f64, sigma_r: f64) -> SynthParams {
        SynthParams {
            f_scale,
            sigma_r,
            shot_threshold: 0.5,
            n_frames_averaged: 1,
            rng_seed: 0,
        }
    }

    #[test]
    fn blurry_of_identical_frames_without_noise_is_the_frame() {
        let f = Image::from_fn(4, 5, 3, |(y, x, c)| (y + x + c) as f64 / 12.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = synth_blurry(&vec![f.clone(); 5], 0.0, &mut rng).unwrap();
        for (a, b) in out.data().iter().zip(f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blurry_of_black_and_white_is_grey() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frames = [Image::zeros(3, 3, 3), Image::filled(3, 3, 3, 1.0)];
        let out = synth_blurry(&frames, 0.0, &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert!(synth_blurry(&[], 0.1, &mut rng).is_err());
    }

    #[test]
    fn shot_noise_of_black_is_black() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = synth_noisy(&Image::zeros(8, 8, 3), &params(0.35, 0.07), &mut rng).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn triple_skips_frame_one_and_records_n() {
        let frames: Vec<Image> = (0..13).map(|i| Image::filled(4, 4, 3, i as f64 / 20.0)).collect();
        let seq = BurstSequence::new("s", frames.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = make_triple(&seq, &params(0.6, 0.0), 0, &mut rng).unwrap();
        assert_eq!(t.params.n_frames_averaged, 11);
        let expect = (2..13).map(|i| i as f64 / 20.0).sum::<f64>() / 11.0;
        assert!(t.blurry.data().iter().all(|v| (v - expect).abs() < 1e-12));
        assert_eq!(t.sharp, frames[0]);

        let four = BurstSequence::new("s", frames[..4].to_vec()).unwrap();
        let t = make_triple(&four, &params(0.6, 0.0), 0, &mut rng).unwrap();
        assert!(t.blurry.data().iter().all(|v| (v - 0.125).abs() < 1e-12));
        assert!(BurstSequence::new("s", frames[..3].to_vec()).is_err());
    }

    #[test]
    fn triple_is_deterministic_and_ignores_frame_one() {
        let frames: Vec<Image> = (0..6)
            .map(|i| Image::from_fn(6, 6, 3, |(y, x, c)| ((y * 6 + x + c + i) % 7) as f64 / 7.0))
            .collect();
        let seq = BurstSequence::new("s", frames.clone()).unwrap();
        let mut perturbed = frames;
        perturbed[1] = Image::filled(6, 6, 3, 0.9);
        let other = BurstSequence::new("s", perturbed).unwrap();
        for p in [params(0.4, 0.06), params(0.7, 0.09)] {
            let a = make_triple(&seq, &p, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let b = make_triple(&seq, &p, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let c = make_triple(&other, &p, 0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            assert_eq!(a, b);
            assert_eq!(a, c);
        }
    }

    #[test]
    fn exposure_ratio_examples() {
        let blurry = Image::from_fn(4, 4, 3, |(y, x, _)| 0.2 + 0.05 * (y + x) as f64);
        let noisy = Image::new(blurry.data().mapv(|v| 0.5 * v)).unwrap();
        assert!((estimate_exposure_ratio(&noisy, &blurry).unwrap() - 2.0).abs() < 1e-12);
        assert!((estimate_exposure_ratio(&blurry, &blurry).unwrap() - 1.0).abs() < 1e-12);
        let black = Image::zeros(4, 4, 3);
        assert!(estimate_exposure_ratio(&black, &blurry).unwrap().is_finite());
    }

    #[test]
    fn crop_of_exact_size_is_identity() {
        let img = Image::from_fn(8, 8, 3, |(y, x, c)| (y * 8 + x + c) as f64 / 80.0);
        let t = ImageTriple {
            noisy: img.clone(),
            blurry: img.clone(),
            sharp: img.clone(),
            params: params(0.5, 0.05),
            scene_id: "s".into(),
            index: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop_triple(&t, 8, &mut rng).unwrap(), t);
        assert!(random_crop_triple(&t, 9, &mut rng).is_err());
    }
}
