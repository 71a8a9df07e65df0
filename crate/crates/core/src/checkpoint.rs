//! Training-state checkpoints: a JSON manifest plus one raw little-endian blob.
//!
//! The blob holds every parameter followed by the optimizer moments
//! (`optim.m.<name>`, `optim.v.<name>`), each at the offset recorded in the
//! manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::Model;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::trainer::{IntervalStats, MetricRecord, RngState, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const FORMAT: &str = "route-detr-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub dtype: Dtype,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub step: u64,
    pub optim_step: u64,
    pub seed: u64,
    pub rng: RngState,
    pub config: RunConfig,
    pub interval: IntervalStats,
    pub history: Vec<MetricRecord>,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

fn width(dtype: Dtype) -> usize {
    match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    }
}

fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    for &v in t.data() {
        match T::DTYPE {
            Dtype::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

fn decode<T: Scalar>(bytes: &[u8], dtype: Dtype) -> Vec<T> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    }
}

pub fn save<T: Scalar>(state: &TrainState<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<T>, blob: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
            dtype: T::DTYPE,
        });
        encode(t, blob);
    };
    for (_, name, t) in state.model.params.iter() {
        push(name.to_string(), t, &mut blob);
    }
    for ((_, name, _), m) in state.model.params.iter().zip(&state.optim.m) {
        push(format!("optim.m.{name}"), m, &mut blob);
    }
    for ((_, name, _), v) in state.model.params.iter().zip(&state.optim.v) {
        push(format!("optim.v.{name}"), v, &mut blob);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        step: state.step,
        optim_step: state.optim.step,
        seed: state.config.train.seed,
        rng: RngState::capture(&state.rng),
        config: state.config.clone(),
        interval: state.interval.clone(),
        history: state.history.clone(),
        blob_bytes: blob.len() as u64,
        tensors,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let (mpath, bpath) = paths(dir);
    fs::write(&bpath, &blob).map_err(|e| Error::io(&bpath, e))?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    Ok(())
}

fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(MANIFEST), dir.join(BLOB))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let (mpath, _) = paths(dir);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", mpath.display())))?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            m.format
        )));
    }
    Ok(m)
}

/// Restores a full training state. The model layout is rebuilt from the
/// stored configuration and every tensor must match it in name and shape.
pub fn load<T: Scalar>(dir: &Path) -> Result<TrainState<T>> {
    let manifest = read_manifest(dir)?;
    let (_, bpath) = paths(dir);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, manifest expects {}",
            bpath.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }

    let mut state = TrainState::<T>::new(manifest.config.clone())?;
    let names: Vec<String> = state.model.params.names().to_vec();
    let expected = 3 * names.len();
    if manifest.tensors.len() != expected {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model needs {expected}",
            manifest.tensors.len()
        )));
    }
    let mut slot = 0;
    for (section, prefix) in [(0, ""), (1, "optim.m."), (2, "optim.v.")] {
        for (i, name) in names.iter().enumerate() {
            let entry = &manifest.tensors[slot];
            slot += 1;
            let want = format!("{prefix}{name}");
            let shape = state
                .model
                .params
                .get(crate::params::ParamId(i))
                .shape()
                .to_vec();
            if entry.name != want || entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "entry {:?} {:?} does not match expected {want:?} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            let numel: usize = shape.iter().product();
            let start = entry.offset as usize;
            let end = start + numel * width(entry.dtype);
            let bytes = blob.get(start..end).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "entry {:?} overruns the {}-byte blob",
                    entry.name,
                    blob.len()
                ))
            })?;
            let t = Tensor::new(&shape, decode(bytes, entry.dtype))?;
            match section {
                0 => *state.model.params.get_mut(crate::params::ParamId(i)) = t,
                1 => state.optim.m[i] = t,
                _ => state.optim.v[i] = t,
            }
        }
    }
    state.step = manifest.step;
    state.optim.step = manifest.optim_step;
    state.rng = manifest.rng.restore()?;
    state.interval = manifest.interval;
    state.history = manifest.history;
    Ok(state)
}

/// Parameters only, for evaluation.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<Model<T>> {
    Ok(load::<T>(dir)?.model)
}
