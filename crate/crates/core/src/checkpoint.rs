//! Weight files: a flat little-endian `f64` blob plus a JSON sidecar.
//!
//! The sidecar lists every tensor's name, shape and byte offset into the blob
//! and carries the configuration needed to rebuild the model. Backbone weight
//! files use the same layout restricted to `backbone.*` tensors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Parameter};
use crate::backbone::is_backbone_param;
use crate::model::{EpiModel, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};
use crate::Error;

pub const FORMAT: &str = "epitoken-weights-1";
pub const DTYPE: &str = "f64-le";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightIndex {
    pub format: String,
    pub dtype: String,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightPaths {
    pub blob: PathBuf,
    pub sidecar: PathBuf,
}

impl WeightPaths {
    /// `<stem>.bin` and `<stem>.json`.
    pub fn from_stem(stem: impl AsRef<Path>) -> Self {
        let stem = stem.as_ref();
        let with = |ext: &str| {
            let mut s = stem.as_os_str().to_owned();
            s.push(ext);
            PathBuf::from(s)
        };
        Self {
            blob: with(".bin"),
            sidecar: with(".json"),
        }
    }
}

/// Writes the selected parameters in store order.
pub fn write_weights<S: Scalar>(
    store: &ParamStore<S>,
    mut select: impl FnMut(&Parameter<S>) -> bool,
    config: &impl Serialize,
    paths: &WeightPaths,
) -> Result<(), Error> {
    let mut blob = Vec::new();
    let mut tensors = Vec::new();
    for (_, p) in store.iter().filter(|(_, p)| select(p)) {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len(),
            frozen: p.frozen,
        });
        for x in p.value.data() {
            blob.extend_from_slice(&x.to_f64_lossy().to_le_bytes());
        }
    }
    let index = WeightIndex {
        format: FORMAT.into(),
        dtype: DTYPE.into(),
        config: serde_json::to_value(config)?,
        tensors,
    };
    if let Some(dir) = paths.blob.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    std::fs::write(&paths.blob, blob).map_err(Error::io(&paths.blob))?;
    let body = serde_json::to_string_pretty(&index)?;
    std::fs::write(&paths.sidecar, body + "\n").map_err(Error::io(&paths.sidecar))?;
    Ok(())
}

/// Reads a weight file, returning the index and each tensor's values.
pub fn read_weights(paths: &WeightPaths) -> Result<(WeightIndex, Vec<Vec<f64>>), Error> {
    for p in [&paths.blob, &paths.sidecar] {
        if !p.exists() {
            return Err(Error::MissingCheckpoint(p.clone()));
        }
    }
    let text = std::fs::read_to_string(&paths.sidecar).map_err(Error::io(&paths.sidecar))?;
    let index: WeightIndex = serde_json::from_str(&text)?;
    if index.format != FORMAT || index.dtype != DTYPE {
        return Err(Error::Checkpoint(format!(
            "unsupported weight format {}/{}",
            index.format, index.dtype
        )));
    }
    let blob = std::fs::read(&paths.blob).map_err(Error::io(&paths.blob))?;
    let mut values = Vec::with_capacity(index.tensors.len());
    for t in &index.tensors {
        let end = t.offset + 8 * numel(&t.shape);
        if end > blob.len() || t.offset % 8 != 0 {
            return Err(Error::Checkpoint(format!(
                "tensor {} at bytes {}..{end} lies outside the {}-byte blob",
                t.name,
                t.offset,
                blob.len()
            )));
        }
        values.push(
            blob[t.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        );
    }
    Ok((index, values))
}

/// Copies named tensors into `store`. Every selected store parameter must be
/// present with a matching shape. Returns the number of tensors loaded.
fn load_into<S: Scalar>(
    store: &mut ParamStore<S>,
    index: &WeightIndex,
    values: &[Vec<f64>],
    mut select: impl FnMut(&str) -> bool,
) -> Result<usize, Error> {
    let wanted: Vec<_> = store.iter().filter(|(_, p)| select(&p.name)).map(|(id, _)| id).collect();
    for &id in &wanted {
        let name = store.get(id).name.clone();
        let k = index
            .tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from weight file")))?;
        let p = store.get_mut(id);
        if index.tensors[k].shape != p.value.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} in the file but {:?} in the model",
                index.tensors[k].shape,
                p.value.shape()
            )));
        }
        p.value = Tensor::new(p.value.shape().to_vec(), values[k].iter().map(|&x| S::lit(x)).collect())
            .expect("shape checked");
    }
    Ok(wanted.len())
}

/// Saves every model tensor and the model config.
pub fn save_model<S: Scalar>(model: &EpiModel<S>, paths: &WeightPaths) -> Result<(), Error> {
    write_weights(&model.store, |_| true, &model.config, paths)
}

/// Rebuilds a model from its sidecar config and loads all tensors.
pub fn load_model<S: Scalar>(paths: &WeightPaths) -> Result<EpiModel<S>, Error> {
    let (index, values) = read_weights(paths)?;
    let config: ModelConfig = serde_json::from_value(index.config.clone())
        .map_err(|e| Error::Checkpoint(format!("sidecar config is not a model config: {e}")))?;
    let mut model = EpiModel::new(config)?;
    load_into(&mut model.store, &index, &values, |_| true)?;
    Ok(model)
}

/// Saves only the backbone tensors, with the backbone config.
pub fn save_backbone<S: Scalar>(model: &EpiModel<S>, paths: &WeightPaths) -> Result<(), Error> {
    write_weights(&model.store, |p| is_backbone_param(&p.name), &model.config.backbone, paths)
}

/// Replaces the model's backbone weights with those from a weight file.
pub fn load_backbone_weights<S: Scalar>(model: &mut EpiModel<S>, paths: &WeightPaths) -> Result<usize, Error> {
    let (index, values) = read_weights(paths)?;
    load_into(&mut model.store, &index, &values, is_backbone_param)
}
