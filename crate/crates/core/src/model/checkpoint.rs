//! Parameter archives: a safetensors file mapping dot-separated parameter
//! names to shape-tagged little-endian f32 arrays. The header metadata holds
//! the format version, the model config (JSON) and the training iteration.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use super::params::named_tensors;
use super::LaneDetector;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: &str = "1";

const KEY_VERSION: &str = "format_version";
const KEY_CONFIG: &str = "model_config";
const KEY_ITERATION: &str = "iteration";

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub version: String,
    pub config: ModelConfig,
    pub iteration: usize,
}

pub fn save(model: &LaneDetector, iteration: usize, path: &Path) -> Result<()> {
    let tensors = named_tensors(model.varmap());
    let mut buffers = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let values = t.flatten_all()?.to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = serde_json::to_string(model.config())
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata: HashMap<String, String> = [
        (KEY_VERSION.to_string(), FORMAT_VERSION.to_string()),
        (KEY_CONFIG.to_string(), config),
        (KEY_ITERATION.to_string(), iteration.to_string()),
    ]
    .into();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    safetensors::serialize_to_file(views, Some(metadata), path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_meta(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint(format!("{}: missing metadata", path.display())))?;
    let get = |key: &str| {
        meta.get(key)
            .ok_or_else(|| Error::Checkpoint(format!("{}: missing {key}", path.display())))
    };
    let version = get(KEY_VERSION)?.clone();
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let config = serde_json::from_str(get(KEY_CONFIG)?)
        .map_err(|e| Error::Checkpoint(format!("{}: bad config: {e}", path.display())))?;
    let iteration = get(KEY_ITERATION)?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("{}: bad iteration: {e}", path.display())))?;
    Ok(CheckpointMeta {
        version,
        config,
        iteration,
    })
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    parse_meta(&read(path)?, path)
}

/// Rebuilds the model stored in `path` with its own config.
pub fn load(path: &Path) -> Result<(LaneDetector, CheckpointMeta)> {
    let bytes = read(path)?;
    let meta = parse_meta(&bytes, path)?;
    let model = LaneDetector::new(&meta.config)?;
    load_into(&model, &bytes, path)?;
    Ok((model, meta))
}

/// Loads parameters from `path` into an existing model after checking that
/// every name and shape matches.
pub fn load_weights(model: &LaneDetector, path: &Path) -> Result<CheckpointMeta> {
    let bytes = read(path)?;
    let meta = parse_meta(&bytes, path)?;
    load_into(model, &bytes, path)?;
    Ok(meta)
}

fn load_into(model: &LaneDetector, bytes: &[u8], path: &Path) -> Result<()> {
    let archive = SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let stored: HashMap<String, TensorView<'_>> = archive.tensors().into_iter().collect();
    let vars = model.varmap().data().lock().expect("varmap lock");

    let mut problems = Vec::new();
    for (name, var) in vars.iter() {
        match stored.get(name) {
            None => problems.push(format!("{name}: missing from checkpoint")),
            Some(view) if view.dtype() != Dtype::F32 => {
                problems.push(format!("{name}: stored as {:?}, expected F32", view.dtype()))
            }
            Some(view) if view.shape() != var.as_tensor().dims() => problems.push(format!(
                "{name}: checkpoint shape {:?}, model shape {:?}",
                view.shape(),
                var.as_tensor().dims()
            )),
            Some(_) => {}
        }
    }
    for name in stored.keys() {
        if !vars.contains_key(name) {
            problems.push(format!("{name}: not a model parameter"));
        }
    }
    if !problems.is_empty() {
        problems.sort();
        return Err(Error::ShapeMismatch(problems));
    }
    for (name, var) in vars.iter() {
        let view = &stored[name];
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        var.set(&Tensor::from_vec(values, view.shape(), &Device::Cpu)?)?;
    }
    Ok(())
}
