//! Named-tensor checkpoints with a JSON sidecar.
//!
//! `name.safetensors` holds every parameter and buffer of the model plus any
//! extra state tensors (optimizer momentum) under an `extra/` prefix.
//! `name.json` holds the model configuration, a manifest of the stored model
//! tensors and free-form training state.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegmentationModel};

pub const EXTRA_PREFIX: &str = "extra/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorInfo>,
    #[serde(default)]
    pub state: serde_json::Value,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// `x.safetensors` -> `x.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn parse_dtype(s: &str) -> Result<DType> {
    s.parse::<DType>().map_err(|_| ckpt_err(format!("unknown dtype {s:?}")))
}

pub fn save(
    model: &SegmentationModel,
    path: &Path,
    state: serde_json::Value,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let entries = model.store().entries();
    let mut tensors: HashMap<String, Tensor> = HashMap::with_capacity(entries.len() + extra.len());
    let mut manifest = Vec::with_capacity(entries.len());
    for e in &entries {
        let t = e.var.as_tensor().clone();
        manifest.push(TensorInfo { name: e.name.clone(), shape: t.dims().to_vec(), dtype: t.dtype().as_str().into() });
        tensors.insert(e.name.clone(), t);
    }
    for (name, t) in extra {
        tensors.insert(format!("{EXTRA_PREFIX}{name}"), t.clone());
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    candle_core::safetensors::save(&tensors, path)?;
    let meta = CheckpointMeta {
        model: model.config().clone(),
        dtype: model.dtype().as_str().into(),
        tensors: manifest,
        state,
    };
    std::fs::write(sidecar_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side)
        .map_err(|e| ckpt_err(format!("cannot read {}: {e}", side.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Copies stored tensors into `model`. Every model tensor must be present
/// with the same shape; unknown non-extra names are rejected.
pub fn load_into(model: &SegmentationModel, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let entries = model.store().entries();
    for e in &entries {
        let t = tensors.get(&e.name).ok_or_else(|| ckpt_err(format!("missing tensor {}", e.name)))?;
        if t.dims() != e.var.dims() {
            return Err(ckpt_err(format!("{}: stored shape {:?}, model expects {:?}", e.name, t.dims(), e.var.dims())));
        }
        e.var.set(&t.to_dtype(e.var.dtype())?)?;
    }
    if let Some(name) = tensors
        .keys()
        .find(|k| !k.starts_with(EXTRA_PREFIX) && !entries.iter().any(|e| &e.name == *k))
    {
        return Err(ckpt_err(format!("unexpected tensor {name}")));
    }
    Ok(())
}

#[derive(Debug)]
pub struct LoadedCheckpoint {
    pub model: SegmentationModel,
    pub meta: CheckpointMeta,
    /// Extra tensors with the prefix stripped.
    pub extra: HashMap<String, Tensor>,
}

/// Rebuilds the model from the sidecar and loads its weights.
pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    let meta = read_meta(path)?;
    let dtype = parse_dtype(&meta.dtype)?;
    let model = SegmentationModel::new(&meta.model, dtype, 0)?;
    let tensors = candle_core::safetensors::load(path, &Device::Cpu)
        .map_err(|e| ckpt_err(format!("cannot read {}: {e}", path.display())))?;
    load_into(&model, &tensors)?;
    let extra = tensors
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(EXTRA_PREFIX).map(|s| (s.to_string(), v)))
        .collect();
    Ok(LoadedCheckpoint { model, meta, extra })
}
