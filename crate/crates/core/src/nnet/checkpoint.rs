//! JSON checkpoints of named parameter tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ForecastModel, ModelConfig};
use super::tensor::Tensor;
use super::NnError;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize)]
struct NamedRef<'a> {
    name: &'a str,
    shape: &'a [usize],
    data: &'a [f64],
}

#[derive(Serialize)]
struct CheckpointRef<'a> {
    version: u32,
    config: &'a ModelConfig,
    tensors: Vec<NamedRef<'a>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Named {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    config: ModelConfig,
    tensors: Vec<Named>,
}

impl ForecastModel {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>, NnError> {
        let ck = CheckpointRef {
            version: CHECKPOINT_VERSION,
            config: &self.config,
            tensors: self
                .params
                .iter()
                .map(|(name, t)| NamedRef {
                    name,
                    shape: &t.shape,
                    data: &t.data,
                })
                .collect(),
        };
        Ok(serde_json::to_vec(&ck)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        for (name, t) in self.params.iter() {
            if !t.is_finite() {
                return Err(NnError::Checkpoint(format!("refusing to save non-finite tensor {name}")));
            }
        }
        fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    /// Rebuilds a model from its stored config and parameters.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let ck: Checkpoint = serde_json::from_slice(bytes)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let mut model = ForecastModel::new(ck.config, 0)?;
        model.assign(ck.tensors)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| NnError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    /// Overwrites this model's parameters from a checkpoint built for the
    /// same architecture. Any name or shape mismatch is an error and leaves
    /// the model untouched.
    pub fn load_params(&mut self, path: impl AsRef<Path>) -> Result<(), NnError> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        self.assign(ck.tensors)
    }

    fn assign(&mut self, tensors: Vec<Named>) -> Result<(), NnError> {
        if tensors.len() != self.params.len() {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                tensors.len(),
                self.params.len()
            )));
        }
        let mut staged = Vec::with_capacity(tensors.len());
        for n in tensors {
            let id = self
                .params
                .id(&n.name)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown tensor {}", n.name)))?;
            let expected = &self.params.get(id).shape;
            if *expected != n.shape {
                return Err(NnError::Shape {
                    name: n.name,
                    expected: expected.clone(),
                    found: n.shape,
                });
            }
            let t = Tensor::from_vec(&n.shape, n.data)
                .ok_or_else(|| NnError::Checkpoint(format!("tensor {} data does not fill its shape", n.name)))?;
            staged.push((id, t));
        }
        for (id, t) in staged {
            *self.params.get_mut(id) = t;
        }
        Ok(())
    }
}
