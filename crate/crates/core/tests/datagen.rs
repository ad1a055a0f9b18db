mod common;

use std::fs;
use std::path::Path;

use common::rng;
use deblurpair_core::datagen::toy::toy_burst;
use deblurpair_core::datagen::{
    build_dataset, estimate_exposure_ratio, load_triple, random_crop_triple, read_manifest, synth_blurry, synth_noisy,
    unique_intensities, DatasetOptions, ImageTriple, ManifestEntry, Split, SynthParams, MANIFEST_FILE,
};
use deblurpair_core::imgproc::{scale_exposure, Image};
use deblurpair_core::io::write_png;
use rand::Rng;

fn per_pixel_moments(draws: &[Image]) -> (Vec<f64>, Vec<f64>) {
    let n = draws.len() as f64;
    let len = draws[0].data().len();
    let mut mean = vec![0.0; len];
    let mut sq = vec![0.0; len];
    for d in draws {
        for (i, v) in d.data().iter().enumerate() {
            mean[i] += v;
            sq[i] += v * v;
        }
    }
    let var = mean.iter().zip(&sq).map(|(m, s)| (s - m * m / n) / (n - 1.0)).collect();
    (mean.into_iter().map(|m| m / n).collect(), var)
}

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
fn blurry_readout_noise_shrinks_with_n() {
    let mut r = rng(21);
    let std_for = |n: usize, r: &mut rand_chacha::ChaCha8Rng| {
        let frames = vec![Image::filled(4, 4, 1, 0.5); n];
        let draws: Vec<Image> = (0..10_000).map(|_| synth_blurry(&frames, 0.1, r).unwrap()).collect();
        let (_, var) = per_pixel_moments(&draws);
        var.iter().sum::<f64>() / var.len() as f64
    };
    let v10 = std_for(10, &mut r);
    assert!((v10.sqrt() / (0.1 / 10f64.sqrt()) - 1.0).abs() < 0.05, "{}", v10.sqrt());
    let v5 = std_for(5, &mut r);
    assert!((v5 / v10 / 2.0 - 1.0).abs() < 0.1, "{v5} {v10}");
}

#[test]
fn gaussian_regime_noise() {
    let mut r = rng(22);
    let sharp = Image::filled(4, 4, 1, 0.5);
    let draws: Vec<Image> = (0..10_000)
        .map(|_| synth_noisy(&sharp, &params(0.7, 0.08), &mut r).unwrap())
        .collect();
    let (mean, var) = per_pixel_moments(&draws);
    let sd = (var.iter().sum::<f64>() / var.len() as f64).sqrt();
    assert!((sd / 0.08 - 1.0).abs() < 0.05, "{sd}");
    assert!(mean.iter().all(|m| (m - 0.35).abs() < 0.005));
}

/// Poisson statistics on a textured image whose levels stay clear of the
/// clamp at 1.
#[test]
fn poisson_regime_moments_on_texture() {
    let mut r = rng(23);
    let sharp = Image::from_fn(8, 8, 3, |(y, x, c)| 0.2 + ((y * 8 + x) * 3 + c) as f64 / 400.0);
    let p = params(0.4, 0.05);
    let scaled = scale_exposure(&sharp, 0.4).unwrap();
    let sigma_s = unique_intensities(&scaled) as f64;
    assert_eq!(sigma_s, 192.0);
    let draws: Vec<Image> = (0..10_000).map(|_| synth_noisy(&sharp, &p, &mut r).unwrap()).collect();
    let (mean, var) = per_pixel_moments(&draws);
    let expect: Vec<f64> = scaled.data().iter().copied().collect();
    let mean_total: f64 = mean.iter().sum();
    let expect_total: f64 = expect.iter().sum();
    assert!((mean_total / expect_total - 1.0).abs() < 0.02);
    let var_total: f64 = var.iter().sum();
    assert!((var_total / (expect_total / sigma_s) - 1.0).abs() < 0.1, "{var_total}");
    for (m, e) in mean.iter().zip(&expect) {
        assert!((m / e - 1.0).abs() < 0.05, "{m} vs {e}");
    }
}

#[test]
fn exposure_ratio_of_a_noiseless_pair() {
    let seq = toy_burst("e", 3, 32, 6).unwrap();
    let noisy = scale_exposure(&seq.frames()[0], 0.4).unwrap();
    let blurry = synth_blurry(&seq.frames()[2..], 0.0, &mut rng(0)).unwrap();
    let direct = blurry.data().iter().sum::<f64>() / noisy.data().iter().sum::<f64>();
    let got = estimate_exposure_ratio(&noisy, &blurry).unwrap();
    assert!((got - direct).abs() < 1e-12);
    assert!((got - 2.5).abs() < 0.25, "{got}");
}

#[test]
fn full_frame_crop_is_aligned() {
    let coord = |tag: f64| Image::from_fn(720, 1280, 3, |(y, x, c)| [y as f64 / 720.0, x as f64 / 1280.0, tag][c]);
    let t = ImageTriple {
        noisy: coord(0.1),
        blurry: coord(0.2),
        sharp: coord(0.3),
        params: params(0.5, 0.05),
        scene_id: "c".into(),
        index: 0,
    };
    let mut r = rng(5);
    let c = random_crop_triple(&t, 256, &mut r).unwrap();
    assert_eq!(c.sharp.dim(), (256, 256, 3));
    for img in [&c.noisy, &c.blurry] {
        for y in 0..256 {
            for x in 0..256 {
                assert_eq!(img.data()[[y, x, 0]], c.sharp.data()[[y, x, 0]]);
                assert_eq!(img.data()[[y, x, 1]], c.sharp.data()[[y, x, 1]]);
            }
        }
    }
    assert!(random_crop_triple(&t, 800, &mut r).is_err());
}

fn write_scene(root: &Path, name: &str, seed: u64, frames: usize, size: usize) {
    let seq = toy_burst(name, seed, size, frames).unwrap();
    for (i, f) in seq.frames().iter().enumerate() {
        write_png(root.join(name).join(format!("{}.png", i + 1)), f).unwrap();
    }
}

#[test]
fn dataset_is_deterministic_and_split_by_scene() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    for s in 0..5 {
        write_scene(&src, &format!("scene{s}"), s, 30, 32);
    }
    // Mismatched frame sizes make a scene fail without stopping the rest.
    write_scene(&src, "broken", 9, 10, 32);
    write_png(src.join("broken/11.png"), &Image::filled(16, 16, 3, 0.5)).unwrap();

    let opts = DatasetOptions {
        seed: 3,
        ..DatasetOptions::default()
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let ma = build_dataset(&src, &a, &opts).unwrap();
    build_dataset(&src, &b, &opts).unwrap();
    assert_eq!(
        fs::read(a.join(MANIFEST_FILE)).unwrap(),
        fs::read(b.join(MANIFEST_FILE)).unwrap()
    );
    let errors: Vec<_> = ma.errors().collect();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0].scene_id, "broken");

    let read = read_manifest(&a.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read, ma);
    let train: std::collections::BTreeSet<_> = read.split(Split::Train).map(|t| t.scene_id.clone()).collect();
    let eval: std::collections::BTreeSet<_> = read.split(Split::Eval).map(|t| t.scene_id.clone()).collect();
    assert!(train.is_disjoint(&eval));
    assert_eq!(train.len() + eval.len(), 5);
    // The broken scene still occupies a slot in the 6-scene split.
    assert!((3..=4).contains(&train.len()));
    for rec in read.triples() {
        assert!((9..=13).contains(&(rec.n_frames_averaged + 2)));
        assert!((0.3..=0.8).contains(&rec.f_scale) && (0.05..=0.1).contains(&rec.sigma_r));
        let t = load_triple(&a, rec).unwrap();
        assert_eq!(t.sharp.dim(), (32, 32, 3));
        assert!(a
            .join(rec.split.dir_name())
            .join(format!("{}_{}", rec.scene_id, rec.index))
            .is_dir());
    }
    assert!(read.entries.iter().any(|e| matches!(e, ManifestEntry::Error(_))));

    let other = tmp.path().join("c");
    build_dataset(&src, &other, &DatasetOptions { seed: 4, ..opts }).unwrap();
    assert_ne!(
        fs::read(a.join(MANIFEST_FILE)).unwrap(),
        fs::read(other.join(MANIFEST_FILE)).unwrap()
    );
}

#[test]
fn empty_source_gives_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    fs::create_dir_all(&src).unwrap();
    let m = build_dataset(&src, &tmp.path().join("out"), &DatasetOptions::default()).unwrap();
    assert!(m.entries.is_empty());
    assert_eq!(
        fs::read_to_string(tmp.path().join("out").join(MANIFEST_FILE)).unwrap(),
        ""
    );
}

#[test]
fn synthesis_is_reproducible_from_the_seed() {
    let seq = toy_burst("r", 1, 16, 9).unwrap();
    let mut r = rng(8);
    let p = SynthParams {
        rng_seed: r.gen(),
        ..params(0.35, 0.06)
    };
    let a = deblurpair_core::datagen::make_triple(&seq, &p, 0, &mut rng(p.rng_seed)).unwrap();
    let b = deblurpair_core::datagen::make_triple(&seq, &p, 0, &mut rng(p.rng_seed)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.params.n_frames_averaged, 7);
}
