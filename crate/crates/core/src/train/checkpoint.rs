use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::SlotSpe;
use crate::nn::ParamStore;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLSPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamFirst,
    AdamSecond,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    rows: usize,
    cols: usize,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    version: u32,
    config: TrainConfig,
    d: usize,
    m_g: usize,
    epoch: usize,
    /// Seed from which every per-epoch stream is derived.
    rng_seed: u64,
    optimizer_step: u64,
    optimizer_skipped: u64,
    tensors: Vec<TensorEntry>,
}

/// Trained parameters, optimizer moments and the configuration that produced
/// them, stored as binary32.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub d: usize,
    pub m_g: usize,
    pub epoch: usize,
    pub params: ParamStore<f32>,
    pub optimizer: Adam<f32>,
}

fn truncated(what: &str) -> Error {
    Error::Checkpoint(format!("truncated {what}"))
}

impl Checkpoint {
    pub fn from_model<F: Scalar>(config: &TrainConfig, model: &SlotSpe<F>, optimizer: &Adam<F>) -> Self {
        Self {
            config: config.clone(),
            d: model.d,
            m_g: model.m_g,
            epoch: model.epochs_trained,
            params: model.store.cast(),
            optimizer: Adam {
                learning_rate: optimizer.learning_rate,
                step: optimizer.step,
                first: optimizer.first.iter().map(|t| t.cast()).collect(),
                second: optimizer.second.iter().map(|t| t.cast()).collect(),
                skipped: optimizer.skipped,
            },
        }
    }

    /// Rebuilds the model; parameter names and shapes must match the
    /// architecture the stored configuration describes.
    pub fn to_model<F: Scalar>(&self) -> Result<SlotSpe<F>> {
        let mut model = SlotSpe::<F>::new(self.config.model.clone(), self.d, self.m_g, self.config.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} stored parameters, architecture has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (id, stored) in self.params.iter() {
            let fresh = model.store.get(id);
            if fresh.name != stored.name || fresh.value.shape() != stored.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} ({:?}) does not match architecture {} ({:?})",
                    stored.name,
                    stored.value.shape(),
                    fresh.name,
                    fresh.value.shape()
                )));
            }
            *model.store.value_mut(id) = stored.value.cast();
        }
        model.epochs_trained = self.epoch;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor<f32>> = Vec::new();
        for (i, (_, p)) in self.params.iter().enumerate() {
            tensors.push(TensorEntry { name: p.name.clone(), role: Role::Param, rows: p.value.rows(), cols: p.value.cols(), trainable: p.trainable });
            payload.push(&p.value);
            for (role, t) in [(Role::AdamFirst, &self.optimizer.first[i]), (Role::AdamSecond, &self.optimizer.second[i])] {
                tensors.push(TensorEntry { name: p.name.clone(), role, rows: t.rows(), cols: t.cols(), trainable: p.trainable });
                payload.push(t);
            }
        }
        let index = Index {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            d: self.d,
            m_g: self.m_g,
            epoch: self.epoch,
            rng_seed: self.config.seed,
            optimizer_step: self.optimizer.step,
            optimizer_skipped: self.optimizer.skipped,
            tensors,
        };
        let json = serde_json::to_vec(&index).expect("checkpoint index serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes.get(20..20usize.checked_add(len).ok_or_else(|| truncated("index"))?).ok_or_else(|| truncated("index"))?;
        let index: Index = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("index: {e}")))?;
        let mut cursor = 20 + len;
        let mut params = ParamStore::new();
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for entry in &index.tensors {
            let n = entry.rows.checked_mul(entry.cols).ok_or_else(|| truncated("tensor"))?;
            let end = n.checked_mul(4).and_then(|b| cursor.checked_add(b)).ok_or_else(|| truncated("tensor"))?;
            let raw = bytes.get(cursor..end).ok_or_else(|| truncated(&format!("tensor {}", entry.name)))?;
            cursor = end;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(entry.rows, entry.cols, data).unwrap();
            match entry.role {
                Role::Param => {
                    if params.find(&entry.name).is_some() {
                        return Err(Error::Checkpoint(format!("duplicate parameter {}", entry.name)));
                    }
                    params.add(entry.name.clone(), t, entry.trainable);
                }
                Role::AdamFirst => first.push(t),
                Role::AdamSecond => second.push(t),
            }
        }
        if cursor != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - cursor)));
        }
        if first.len() != params.len() || second.len() != params.len() {
            return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
        }
        Ok(Self {
            optimizer: Adam {
                learning_rate: index.config.learning_rate,
                step: index.optimizer_step,
                first,
                second,
                skipped: index.optimizer_skipped,
            },
            config: index.config,
            d: index.d,
            m_g: index.m_g,
            epoch: index.epoch,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
