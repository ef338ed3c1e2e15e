use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{FlowModel, ModelConfig, ModelKind, TrainingMeta};
use crate::autodiff::{ParamStore, Tensor};
use crate::checkpoint::{self, sha256_hex};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    kind: ModelKind,
    config: ModelConfig,
    meta: TrainingMeta,
}

/// Overwrites parameter values by name. Every parameter of `store` must be
/// present in `named` with a matching shape, and no extra names are allowed.
pub fn load_named(store: &mut ParamStore, named: Vec<(String, Tensor)>, origin: &Path) -> Result<()> {
    if named.len() != store.len() {
        return Err(Error::Corrupt {
            path: origin.to_path_buf(),
            reason: format!("{} parameters stored, model has {}", named.len(), store.len()),
        });
    }
    for (name, value) in named {
        let id = store.find(&name).ok_or_else(|| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: format!("unknown parameter `{name}`"),
        })?;
        let p = store.get_mut(id);
        if p.value.shape() != value.shape() {
            return Err(Error::Corrupt {
                path: origin.to_path_buf(),
                reason: format!("parameter `{name}`: shape {:?}, expected {:?}", value.shape(), p.value.shape()),
            });
        }
        p.value = value;
    }
    Ok(())
}

pub(crate) fn named_params(store: &ParamStore) -> Vec<(String, &Tensor)> {
    store.iter().map(|p| (p.name.clone(), &p.value)).collect()
}

impl FlowModel {
    /// Serializes to the checkpoint container. Values are stored as `f32`.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = ModelHeader {
            kind: self.kind(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        };
        let content = serde_json::json!({ "model": header });
        checkpoint::encode(content, &named_params(self.params()))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (content, params) = checkpoint::decode(bytes, origin)?;
        let value = content.get("model").cloned().ok_or_else(|| Error::Corrupt {
            path: origin.to_path_buf(),
            reason: "not a single-model checkpoint".into(),
        })?;
        let header: ModelHeader = serde_json::from_value(value)?;
        if header.kind != header.config.kind {
            return Err(Error::Corrupt {
                path: origin.to_path_buf(),
                reason: format!("kind {} disagrees with config {}", header.kind, header.config.kind),
            });
        }
        let mut model = FlowModel::new(header.config, 0)?;
        model.meta = header.meta;
        load_named(model.params_mut(), params, origin)?;
        Ok(model)
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn checkpoint_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        FlowModel::from_bytes(&checkpoint::read_file(path)?, path)
    }

    /// Rounds every parameter to `f32`, so the in-memory model matches what a
    /// save/load round trip would produce.
    pub fn quantize_to_f32(&mut self) {
        for p in self.params_mut().iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}
