use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: [usize; 2],
    pub trainable: bool,
    pub data: Vec<f64>,
}

/// Model parameters by name, with the config needed to rebuild the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub config: ModelConfig,
    pub step: usize,
    /// Hash of every frozen parameter; unchanged by training.
    pub frozen_hash: String,
    pub merged: bool,
    pub tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path, format!("line {} column {}", e.line(), e.column()), e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                ck.format
            )));
        }
        Ok(ck)
    }
}

impl<T: Scalar> Model<T> {
    pub fn to_checkpoint(&self, step: usize) -> Checkpoint {
        let tensors = self
            .store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    TensorRecord {
                        shape: [p.value.rows(), p.value.cols()],
                        trainable: p.trainable,
                        data: p.value.data().iter().map(|v| v.as_f64()).collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            step,
            frozen_hash: self.frozen_hash(),
            merged: !self.config.lora.enabled,
            tensors,
        }
    }

    /// Rebuilds the model and verifies that the frozen weights hash as recorded.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Model::<T>::new(&ck.config)?;
        let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
        if ids.len() != ck.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.tensors.len(),
                ids.len()
            )));
        }
        for (id, name) in ids {
            let rec = ck
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            let p = model.store.get_mut(id);
            if [p.value.rows(), p.value.cols()] != rec.shape || rec.data.len() != rec.shape[0] * rec.shape[1] {
                return Err(Error::Checkpoint(format!("tensor '{name}' has the wrong shape")));
            }
            p.value = Matrix::from_f64(rec.shape[0], rec.shape[1], &rec.data);
            p.trainable = rec.trainable;
        }
        let hash = model.frozen_hash();
        if hash != ck.frozen_hash {
            return Err(Error::Checkpoint(format!(
                "frozen weight hash mismatch: recorded {}, computed {hash}",
                ck.frozen_hash
            )));
        }
        Ok(model)
    }
}
