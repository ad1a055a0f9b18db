use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{make_triple, BurstSequence, ImageTriple, SynthParams, SynthRanges};
use crate::error::{ensure, Error, Result};
use crate::imgproc::Image;
use crate::io::{png_dimensions, read_png, write_png};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriplePaths {
    pub noisy: PathBuf,
    pub blurry: PathBuf,
    pub sharp: PathBuf,
}

/// One manifest line describing a written triple. Paths are relative to the
/// dataset root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleRecord {
    pub scene_id: String,
    pub index: usize,
    pub split: Split,
    pub f_scale: f64,
    pub sigma_r: f64,
    pub shot_threshold: f64,
    pub n_frames_averaged: usize,
    pub rng_seed: u64,
    pub paths: TriplePaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneError {
    pub scene_id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ManifestEntry {
    Triple(TripleRecord),
    Error(SceneError),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn triples(&self) -> impl Iterator<Item = &TripleRecord> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Triple(t) => Some(t),
            ManifestEntry::Error(_) => None,
        })
    }

    pub fn errors(&self) -> impl Iterator<Item = &SceneError> {
        self.entries.iter().filter_map(|e| match e {
            ManifestEntry::Error(e) => Some(e),
            ManifestEntry::Triple(_) => None,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &TripleRecord> {
        self.triples().filter(move |t| t.split == split)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub seed: u64,
    pub ranges: SynthRanges,
    pub train_fraction: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            seed: 0,
            ranges: SynthRanges::default(),
            train_fraction: 0.64,
        }
    }
}

/// Child seed for one scene, independent of processing order.
pub fn scene_seed(seed: u64, scene_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(scene_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn list_dirs(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| Error::io(root, e))? {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        if entry.path().is_dir() {
            out.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    out.sort();
    Ok(out)
}

/// PNG files of a scene, ordered by their numeric stem.
fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if !is_png {
            continue;
        }
        match path
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok())
        {
            Some(n) => frames.push((n, path)),
            None => log::warn!("skipping non-numeric frame {}", path.display()),
        }
    }
    frames.sort();
    Ok(frames.into_iter().map(|(_, p)| p).collect())
}

fn synth_scene(
    src: &Path,
    out_root: &Path,
    scene_id: &str,
    split: Split,
    opts: &DatasetOptions,
) -> Result<Vec<TripleRecord>> {
    let frames = list_frames(&src.join(scene_id))?;
    if let Some(first) = frames.first() {
        let dim = png_dimensions(first)?;
        for f in &frames[1..] {
            let d = png_dimensions(f)?;
            ensure!(
                d == dim,
                "frame {} is {}x{}, expected {}x{}",
                f.display(),
                d.0,
                d.1,
                dim.0,
                dim.1
            );
        }
    }
    let r = &opts.ranges;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(opts.seed, scene_id));
    let mut records = Vec::new();
    let mut start = 0;
    loop {
        let len = rng.gen_range(r.window_min..=r.window_max);
        if start + len > frames.len() {
            break;
        }
        let params = r.sample(len - 2, &mut rng);
        let images = frames[start..start + len]
            .iter()
            .map(read_png)
            .collect::<Result<Vec<Image>>>()?;
        let seq = BurstSequence::new(scene_id, images)?;
        let index = records.len();
        let triple = make_triple(&seq, &params, index, &mut ChaCha8Rng::seed_from_u64(params.rng_seed))?;
        records.push(write_triple(out_root, split, &triple)?);
        start += len;
    }
    Ok(records)
}

fn write_triple(out_root: &Path, split: Split, t: &ImageTriple) -> Result<TripleRecord> {
    let rel = PathBuf::from(split.dir_name()).join(format!("{}_{}", t.scene_id, t.index));
    let paths = TriplePaths {
        noisy: rel.join("noisy.png"),
        blurry: rel.join("blurry.png"),
        sharp: rel.join("sharp.png"),
    };
    write_png(out_root.join(&paths.noisy), &t.noisy)?;
    write_png(out_root.join(&paths.blurry), &t.blurry)?;
    write_png(out_root.join(&paths.sharp), &t.sharp)?;
    let SynthParams {
        f_scale,
        sigma_r,
        shot_threshold,
        n_frames_averaged,
        rng_seed,
    } = t.params;
    Ok(TripleRecord {
        scene_id: t.scene_id.clone(),
        index: t.index,
        split,
        f_scale,
        sigma_r,
        shot_threshold,
        n_frames_averaged,
        rng_seed,
        paths,
    })
}

/// Number of training scenes out of `n`.
pub fn train_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n)
}

/// Synthesizes triples for every scene directory under `src` into `out`
/// and writes `manifest.jsonl`. Scenes that cannot be read are skipped and
/// recorded as error entries.
pub fn build_dataset(src: &Path, out: &Path, opts: &DatasetOptions) -> Result<Manifest> {
    opts.ranges.validate()?;
    ensure!(
        (0.0..=1.0).contains(&opts.train_fraction),
        "train fraction must lie in [0, 1], got {}",
        opts.train_fraction
    );
    let mut scenes = list_dirs(src)?;
    if scenes.is_empty() {
        log::warn!("no scene directories under {}", src.display());
    }
    let mut order = scenes.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let n_train = train_count(order.len(), opts.train_fraction);
    let train: std::collections::HashSet<String> = order[..n_train].iter().cloned().collect();

    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = Manifest::default();
    for scene in scenes.drain(..) {
        let split = if train.contains(&scene) {
            Split::Train
        } else {
            Split::Eval
        };
        match synth_scene(src, out, &scene, split, opts) {
            Ok(records) => manifest.entries.extend(records.into_iter().map(ManifestEntry::Triple)),
            Err(e) => {
                log::warn!("scene {scene} skipped: {e}");
                manifest.entries.push(ManifestEntry::Error(SceneError {
                    scene_id: scene,
                    error: e.to_string(),
                }));
            }
        }
    }
    let path = out.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes())
        .map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Parses a manifest written by [`build_dataset`].
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut manifest = Manifest::default();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        manifest.entries.push(serde_json::from_str(&line)?);
    }
    Ok(manifest)
}

/// Loads the three images of a manifest record.
pub fn load_triple(root: &Path, record: &TripleRecord) -> Result<ImageTriple> {
    Ok(ImageTriple {
        noisy: read_png(root.join(&record.paths.noisy))?,
        blurry: read_png(root.join(&record.paths.blurry))?,
        sharp: read_png(root.join(&record.paths.sharp))?,
        params: SynthParams {
            f_scale: record.f_scale,
            sigma_r: record.sigma_r,
            shot_threshold: record.shot_threshold,
            n_frames_averaged: record.n_frames_averaged,
            rng_seed: record.rng_seed,
        },
        scene_id: record.scene_id.clone(),
        index: record.index,
    })
}
