//! Checkpoint file: magic `WDN1`, u32 version, u32 header length, a JSON
//! header, then float32 little-endian tensor payloads in directory order.
//!
//! Parameters come first, then batch-norm running statistics, each group
//! in name order. Offsets in the directory are relative to the start of
//! the payload section.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WDN1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerState {
    /// Next epoch to run.
    pub epoch: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    buffer: bool,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
    optimizer: OptimizerState,
    rng: Rng,
    metrics: Vec<EpochMetrics>,
}

/// Everything needed to evaluate a model or resume its training.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: ParamSet<f32>,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    pub metrics: Vec<EpochMetrics>,
}

impl Checkpoint {
    pub fn to_model<T: Scalar>(&self) -> Result<Model<T>> {
        Model::from_params(self.model.clone(), self.params.cast())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let groups = [(false, &self.params.params), (true, &self.params.buffers)];
        for (buffer, group) in groups {
            for (name, t) in group {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    buffer,
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            tensors,
            optimizer: self.optimizer,
            rng: self.rng.clone(),
            metrics: self.metrics.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + payload.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Err(Error::Checkpoint(m));
        if bytes.len() < 12 {
            return bad(format!("file truncated ({} bytes)", bytes.len()));
        }
        if &bytes[0..4] != CHECKPOINT_MAGIC {
            return bad("bad magic".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return bad(format!("unsupported version {version}"));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let Some(json) = bytes.get(12..12 + header_len) else {
            return bad("header truncated".into());
        };
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header
            .model
            .validate()
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        let payload = &bytes[12 + header_len..];
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut cursor = 0;
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.offset != cursor {
                return bad(format!(
                    "tensor {} at offset {}, expected {cursor}",
                    entry.name, entry.offset
                ));
            }
            let Some(raw) = payload.get(cursor..cursor + 4 * n) else {
                return bad(format!("payload truncated in tensor {}", entry.name));
            };
            cursor += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let t = Tensor::new(entry.shape, data)?;
            let target = if entry.buffer {
                &mut buffers
            } else {
                &mut params
            };
            if target.insert(entry.name.clone(), t).is_some() {
                return bad(format!("duplicate tensor {}", entry.name));
            }
        }
        if cursor != payload.len() {
            return bad(format!("{} trailing payload bytes", payload.len() - cursor));
        }
        let params = ParamSet { params, buffers };
        params.check_against(&header.model)?;
        Ok(Self {
            model: header.model,
            train: header.train,
            params,
            optimizer: header.optimizer,
            rng: header.rng,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
