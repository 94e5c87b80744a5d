//! Named-array container (safetensors layout with a JSON metadata entry)
//! used for checkpoints, dataset volumes and raw relevance maps.

use std::collections::HashMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::Parameters;

pub const SCHEMA_VERSION: u32 = 1;
const META_KEY: &str = "meta";

#[derive(Clone, Debug, PartialEq)]
pub enum NamedArray {
    F64(ArrayD<f64>),
    U8(ArrayD<u8>),
}

impl NamedArray {
    pub fn into_f64(self) -> Result<ArrayD<f64>> {
        match self {
            NamedArray::F64(a) => Ok(a),
            NamedArray::U8(a) => Ok(a.mapv(f64::from)),
        }
    }

    pub fn into_u8(self) -> Result<ArrayD<u8>> {
        match self {
            NamedArray::U8(a) => Ok(a),
            NamedArray::F64(_) => Err(Error::Checkpoint("expected a u8 array, found f64".into())),
        }
    }

    fn bytes(&self) -> (Dtype, Vec<usize>, Vec<u8>) {
        match self {
            NamedArray::F64(a) => (
                Dtype::F64,
                a.shape().to_vec(),
                a.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            NamedArray::U8(a) => (Dtype::U8, a.shape().to_vec(), a.iter().copied().collect()),
        }
    }
}

/// Writes `arrays` plus a JSON metadata document to one file.
pub fn write_container(path: &Path, arrays: &[(String, NamedArray)], meta: &serde_json::Value) -> Result<()> {
    let encoded: Vec<(String, Dtype, Vec<usize>, Vec<u8>)> = arrays
        .iter()
        .map(|(name, a)| {
            let (dtype, shape, bytes) = a.bytes();
            (name.clone(), dtype, shape, bytes)
        })
        .collect();
    let views = encoded
        .iter()
        .map(|(name, dtype, shape, bytes)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("array `{name}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(views, &Some(info)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Reads every array (sorted by name) and the metadata document.
pub fn read_container(path: &Path) -> Result<(Vec<(String, NamedArray)>, serde_json::Value)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata entry", path.display())))?;
    let meta: serde_json::Value = serde_json::from_str(meta)?;

    let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut names: Vec<String> = tensors.names().into_iter().cloned().collect();
    names.sort();
    let mut arrays = Vec::with_capacity(names.len());
    for name in names {
        let view = tensors.tensor(&name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shape = IxDyn(view.shape());
        let array = match view.dtype() {
            Dtype::F64 => {
                let values: Vec<f64> = view
                    .data()
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                NamedArray::F64(ArrayD::from_shape_vec(shape, values).map_err(|e| Error::Checkpoint(e.to_string()))?)
            }
            Dtype::U8 => NamedArray::U8(
                ArrayD::from_shape_vec(shape, view.data().to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?,
            ),
            other => return Err(Error::Checkpoint(format!("array `{name}` has unsupported dtype {other:?}"))),
        };
        arrays.push((name, array));
    }
    Ok((arrays, meta))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    /// Which model the arrays belong to, e.g. `cvae` or `classifier`.
    pub module: String,
    pub config_hash: String,
    pub epoch: usize,
    #[serde(default)]
    pub metrics: serde_json::Value,
    /// Model configuration needed to rebuild array shapes before loading.
    #[serde(default)]
    pub config: serde_json::Value,
}

impl CheckpointMeta {
    pub fn new(module: &str, config: serde_json::Value) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            module: module.into(),
            config_hash: String::new(),
            epoch: 0,
            metrics: serde_json::Value::Null,
            config,
        }
    }
}

pub fn save_checkpoint<M: Parameters>(path: &Path, model: &M, meta: &CheckpointMeta) -> Result<()> {
    let arrays: Vec<(String, NamedArray)> = model
        .params()
        .into_iter()
        .map(|(name, a)| (name, NamedArray::F64(a.to_owned())))
        .collect();
    write_container(path, &arrays, &serde_json::to_value(meta)?)
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let raw = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata entry", path.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(raw)?;
    check_schema(&meta)?;
    Ok(meta)
}

fn check_schema(meta: &CheckpointMeta) -> Result<()> {
    if meta.schema_version != SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "schema version {} is not supported (expected {SCHEMA_VERSION})",
            meta.schema_version
        )));
    }
    Ok(())
}

/// Loads every array of `model` from `path`, requiring matching names and
/// shapes and the expected `module` tag.
pub fn load_checkpoint<M: Parameters>(path: &Path, module: &str, model: &mut M) -> Result<CheckpointMeta> {
    let (arrays, meta) = read_container(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)?;
    check_schema(&meta)?;
    if meta.module != module {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a `{}` model, expected `{module}`",
            meta.module
        )));
    }
    let mut by_name: HashMap<String, NamedArray> = arrays.into_iter().collect();
    for (name, mut target) in model.params_mut() {
        let source = by_name
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))?
            .into_f64()?;
        if source.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                name,
                expected: target.shape().to_vec(),
                found: source.shape().to_vec(),
            });
        }
        target.assign(&source);
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected array `{extra}`")));
    }
    Ok(meta)
}
