use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::nets::WeightStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8] = b"DBLRPAIR-CKPT-1\n";
pub const LATEST_MARKER: &str = "latest";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    Buffer,
    SpectralU,
    MomentM,
    MomentV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    epoch: usize,
    tensors: Vec<Entry>,
}

fn unsupported(path: &Path, reason: impl Into<String>) -> Error {
    Error::UnsupportedCheckpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serializes the full training state. Arrays are stored as little-endian
/// `f32` after a JSON header; the layout is deterministic.
pub fn checkpoint_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut push = |group: Group, name: &str, shape: &[usize], data: &[f32]| {
        tensors.push(Entry {
            group,
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: blob.len() / 4,
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    let w = &state.weights;
    for (k, t) in &w.params {
        push(Group::Param, k, t.shape(), t.data());
    }
    for (k, t) in &w.buffers {
        push(Group::Buffer, k, t.shape(), t.data());
    }
    for (k, u) in &w.spectral_u {
        push(Group::SpectralU, k, &[u.len()], u);
    }
    for (k, t) in &state.first_moments {
        push(Group::MomentM, k, t.shape(), t.data());
    }
    for (k, t) in &state.second_moments {
        push(Group::MomentV, k, t.shape(), t.data());
    }
    let header = serde_json::to_vec(&Header {
        config: state.config.clone(),
        step: state.step,
        epoch: state.epoch,
        tensors,
    })?;
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 8 + header.len() + blob.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = checkpoint_bytes(state)?;
    let tmp = path.with_extension("ckpt.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let rest = bytes
        .strip_prefix(CHECKPOINT_MAGIC)
        .ok_or_else(|| unsupported(path, "missing or unknown magic header"))?;
    if rest.len() < 8 {
        return Err(unsupported(path, "truncated header"));
    }
    let (len, rest) = rest.split_at(8);
    let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
    if rest.len() < len {
        return Err(unsupported(path, "truncated header"));
    }
    let (header, blob) = rest.split_at(len);
    let header: Header = serde_json::from_slice(header).map_err(|e| unsupported(path, format!("bad header: {e}")))?;
    if blob.len() % 4 != 0 {
        return Err(unsupported(path, "payload is not a whole number of f32 values"));
    }
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut weights = WeightStore::default();
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let data = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| unsupported(path, format!("tensor {} runs past the payload", e.name)))?
            .to_vec();
        if e.group == Group::SpectralU {
            weights.spectral_u.insert(e.name, data);
            continue;
        }
        let t = Tensor::from_vec(&e.shape, data)?;
        let map = match e.group {
            Group::Param => &mut weights.params,
            Group::Buffer => &mut weights.buffers,
            Group::MomentM => &mut m,
            Group::MomentV => &mut v,
            Group::SpectralU => unreachable!(),
        };
        map.insert(e.name, t);
    }
    Ok(TrainState {
        config: header.config,
        weights,
        first_moments: m,
        second_moments: v,
        step: header.step,
        epoch: header.epoch,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes, path)
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch}.ckpt"))
}

/// The checkpoint named by `<dir>/latest`, if any.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    let marker = dir.join(LATEST_MARKER);
    match fs::read_to_string(&marker) {
        Ok(name) => Ok(Some(dir.join(name.trim()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(marker, e)),
    }
}

pub(crate) fn write_latest(dir: &Path, ckpt: &Path) -> Result<()> {
    let marker = dir.join(LATEST_MARKER);
    let name = ckpt
        .file_name()
        .expect("checkpoint path has a file name")
        .to_string_lossy();
    fs::write(&marker, format!("{name}\n")).map_err(|e| Error::io(marker, e))
}
