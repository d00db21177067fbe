//! Checkpoints: one tensor file per parameter plus a JSON manifest holding
//! the architecture snapshot.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_toy_model, ArchConfig, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_file, write_tensor_file, AnyTensor};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub seed: u64,
    pub config: ArchConfig,
    pub params: Vec<ParamEntry>,
}

pub fn save_checkpoint(model: &ToyModel, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut params = Vec::with_capacity(model.params().len());
    for (name, value) in model.params().iter() {
        let file = format!("{name}.tnsr");
        write_tensor_file(dir.join(&file), value)?;
        params.push(ParamEntry { name: name.to_string(), file, shape: value.shape().to_vec() });
    }
    let manifest = CheckpointManifest { seed: model.seed(), config: model.config().clone(), params };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))?;
    Ok(manifest)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<ToyModel> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut model = build_toy_model(&manifest.config, manifest.seed)?;
    if manifest.params.len() != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint lists {} parameters, architecture has {}",
            manifest.params.len(),
            model.params().len()
        )));
    }
    for entry in &manifest.params {
        let slot = model
            .params()
            .slot(&entry.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {}", entry.name)))?;
        let tensor = match read_tensor_file(dir.join(&entry.file))? {
            AnyTensor::F64(t) => t,
            AnyTensor::F32(_) => return Err(Error::Format(format!("{} is stored in single precision", entry.name))),
        };
        if tensor.shape() != model.params().value(slot).shape() || tensor.shape() != entry.shape {
            return Err(Error::Format(format!("shape mismatch for {}", entry.name)));
        }
        *model.params_mut().value_mut(slot) = tensor;
    }
    Ok(model)
}
