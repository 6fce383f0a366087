//! Checkpoints: `manifest.json` plus `weights.bin`, little-endian f64
//! tensors concatenated in manifest order.
//!
//! Optimizer moments are stored as extra tensors named `optim.m/<param>`
//! and `optim.v/<param>` so training can resume exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::encoder::encoder_shapes;
use crate::error::{Error, Result};
use crate::mae::decoder_shapes;
use crate::optim::AdamState;
use crate::params::{Grads, ParamSet};
use crate::position::position_head_shapes;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Encoder, classifier and position heads.
    Supervised,
    /// Adds the reconstruction decoder.
    Pretrain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub config_hash: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Parameter names and shapes a model of this kind carries.
pub fn model_shapes(cfg: &ModelConfig, kind: ModelKind) -> Vec<(String, Vec<usize>)> {
    let mut shapes = encoder_shapes(cfg);
    if kind == ModelKind::Pretrain {
        shapes.extend(decoder_shapes(cfg));
    }
    shapes.extend(position_head_shapes(cfg));
    shapes
}

pub fn save_checkpoint(dir: &Path, cfg: &ModelConfig, kind: ModelKind, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, data: &[f64]| {
        tensors.push(TensorEntry { name, shape, offset: payload.len() });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in state.params.iter() {
        push(name.clone(), t.shape().to_vec(), t.data());
    }
    for (prefix, store) in [(M_PREFIX, &state.optim.m), (V_PREFIX, &state.optim.v)] {
        for (name, values) in store.iter() {
            let shape = state.params.get(name).map(|t| t.shape().to_vec()).unwrap_or_else(|_| vec![values.len()]);
            push(format!("{prefix}{name}"), shape, values);
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind,
        config_hash: cfg.hash(),
        epoch: state.epoch,
        step: state.optim.step,
        tensors,
    };
    fs::write(dir.join(WEIGHTS), payload)?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))
}

/// Loads a checkpoint written for `cfg`. A config-hash mismatch is refused
/// unless `force` is set; a forced load skips the layout check against `cfg`.
pub fn load_checkpoint(dir: &Path, cfg: &ModelConfig, force: bool) -> Result<(TrainState, Manifest)> {
    let manifest = read_manifest(dir)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} (this build reads {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    let expected_hash = cfg.hash();
    if manifest.config_hash != expected_hash && !force {
        return Err(Error::ConfigMismatch { expected: expected_hash, found: manifest.config_hash });
    }
    let bytes = fs::read(dir.join(WEIGHTS))?;
    let mut cursor = 0usize;
    let mut params = ParamSet::new();
    let mut m = Grads::default();
    let mut v = Grads::default();
    for e in &manifest.tensors {
        let len: usize = e.shape.iter().product();
        if e.shape.is_empty() || len == 0 {
            return Err(Error::Format(format!("tensor `{}` has empty shape {:?}", e.name, e.shape)));
        }
        if e.offset != cursor {
            return Err(Error::Format(format!("tensor `{}` at byte {} but expected {cursor}", e.name, e.offset)));
        }
        let end = cursor + 8 * len;
        if end > bytes.len() {
            return Err(Error::Format(format!(
                "tensor `{}` with shape {:?} needs bytes up to {end}, {WEIGHTS} has {}",
                e.name,
                e.shape,
                bytes.len()
            )));
        }
        let data: Vec<f64> = bytes[cursor..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        cursor = end;
        if let Some(name) = e.name.strip_prefix(M_PREFIX) {
            m.insert(name, data);
        } else if let Some(name) = e.name.strip_prefix(V_PREFIX) {
            v.insert(name, data);
        } else {
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
        }
    }
    if cursor != bytes.len() {
        return Err(Error::Format(format!("{WEIGHTS} has {} bytes, manifest accounts for {cursor}", bytes.len())));
    }
    if !force {
        check_layout(&params, cfg, manifest.kind)?;
    }
    let optim = AdamState { step: manifest.step, m, v };
    Ok((TrainState { params, optim, epoch: manifest.epoch }, manifest))
}

fn check_layout(params: &ParamSet, cfg: &ModelConfig, kind: ModelKind) -> Result<()> {
    let expected = model_shapes(cfg, kind);
    for (name, shape) in &expected {
        let t = params
            .get(name)
            .map_err(|_| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::dim(format!("parameter `{name}` has shape {:?}, model expects {shape:?}", t.shape())));
        }
    }
    // Fine-tuned encoders may carry extra tensors (e.g. a PE added after pretraining).
    Ok(())
}
