//! PSNR/SSIM evaluation reports.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::datagen::{self, Split};
use crate::error::{ensure, invalid, Error, Result};
use crate::imgproc::{psnr, ssim, Image};
use crate::infer::restore_pair;
use crate::io::read_png;
use crate::train::TrainState;

/// Serializes `+∞` as the string `"inf"`.
mod db {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("bad PSNR value '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    #[serde(with = "db")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub inference_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(with = "db")]
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub mean_inference_ms: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageScore>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    pub fn new(per_image: Vec<ImageScore>) -> Self {
        let n = per_image.len();
        let mean = |f: &dyn Fn(&ImageScore) -> f64| {
            if n == 0 {
                f64::NAN
            } else {
                per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        let timed: Vec<f64> = per_image.iter().filter_map(|s| s.inference_ms).collect();
        let aggregate = Aggregate {
            mean_psnr_db: mean(&|s| s.psnr_db),
            mean_ssim: mean(&|s| s.ssim),
            mean_inference_ms: (!timed.is_empty() && timed.len() == n).then(|| timed.iter().sum::<f64>() / n as f64),
            count: n,
        };
        EvalReport { per_image, aggregate }
    }

    /// Plain-text table of the aggregate values.
    pub fn table(&self) -> String {
        let a = &self.aggregate;
        let time = a
            .mean_inference_ms
            .map_or_else(|| "-".to_string(), |t| format!("{t:.1}"));
        format!(
            "{:<8} {:>10} {:>8} {:>10}\n{:<8} {:>10} {:>8.4} {:>10}\n",
            "count",
            "PSNR(dB)",
            "SSIM",
            "time(ms)",
            a.count,
            format_db(a.mean_psnr_db),
            a.mean_ssim,
            time
        )
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn format_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

pub fn score(id: impl Into<String>, pred: &Image, gt: &Image, inference_ms: Option<f64>) -> Result<ImageScore> {
    Ok(ImageScore {
        id: id.into(),
        psnr_db: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        inference_ms,
    })
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut names = BTreeSet::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            names.insert(path.file_name().expect("file").to_string_lossy().into_owned());
        }
    }
    Ok(names)
}

/// Files present on only one side of a prediction/ground-truth comparison.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Unmatched {
    pub pred_only: Vec<String>,
    pub gt_only: Vec<String>,
}

/// Matches PNGs by file name. Fails when any file is unmatched or nothing
/// matches, listing the offenders.
pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<EvalReport> {
    let p = png_names(pred)?;
    let g = png_names(gt)?;
    let unmatched = Unmatched {
        pred_only: p.difference(&g).cloned().collect(),
        gt_only: g.difference(&p).cloned().collect(),
    };
    let common: Vec<&String> = p.intersection(&g).collect();
    ensure!(
        !common.is_empty(),
        "no matching file names between {} and {}",
        pred.display(),
        gt.display()
    );
    if unmatched != Unmatched::default() {
        return Err(invalid!(
            "unmatched files: only in predictions {:?}, only in ground truth {:?}",
            unmatched.pred_only,
            unmatched.gt_only
        ));
    }
    let scores = common
        .into_iter()
        .map(|name| {
            let a = read_png(pred.join(name))?;
            let b = read_png(gt.join(name))?;
            ensure!(
                a.dim() == b.dim(),
                "{name}: prediction {:?} vs ground truth {:?}",
                a.dim(),
                b.dim()
            );
            let id = name.trim_end_matches(".png").to_string();
            score(id, &a, &b, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::new(scores))
}

/// Runs the model of `state` on one split of a synthesized dataset.
/// Predictions are written to `save_dir` when given.
pub fn evaluate_model(
    state: &TrainState,
    data_root: &Path,
    split: Split,
    tile: Option<usize>,
    save_dir: Option<&Path>,
) -> Result<EvalReport> {
    let manifest = datagen::read_manifest(&data_root.join(datagen::MANIFEST_FILE))?;
    let nets = state.networks()?;
    let mut scores = Vec::new();
    for rec in manifest.split(split) {
        let t = datagen::load_triple(data_root, rec)?;
        let start = Instant::now();
        let out = restore_pair(&nets, &state.weights, &t.noisy, &t.blurry, tile)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        let id = format!("{}_{}", rec.scene_id, rec.index);
        if let Some(dir) = save_dir {
            crate::io::write_png(dir.join(format!("{id}.png")), &out)?;
        }
        scores.push(score(id, &out, &t.sharp, Some(ms))?);
    }
    ensure!(
        !scores.is_empty(),
        "no {} triples in {}",
        split.dir_name(),
        data_root.display()
    );
    Ok(EvalReport::new(scores))
}

pub fn report_path_default(dir: &Path) -> PathBuf {
    dir.join("report.json")
}
