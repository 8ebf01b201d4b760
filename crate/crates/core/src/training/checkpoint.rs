//! Binary checkpoint files.
//!
//! Layout: magic `MXCK`, `u32` version, `u64` header length, a JSON header
//! (configs, tensor names and shapes, counters, RNG position, digest), then
//! every tensor as little-endian `f64` in header order: parameters, then the
//! first and second optimizer moments of each parameter that has them.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::nn::{self, device};
use crate::training::optimizer::AdamState;
use crate::training::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of the data-order stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub task: Task,
    pub train_config: Option<TrainConfig>,
    pub params: BTreeMap<String, Tensor>,
    pub optimizer: Option<AdamState>,
    pub epoch: usize,
    pub step: usize,
    pub best_metric: Option<f64>,
    pub rng: Option<RngState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    task: Task,
    train_config: Option<TrainConfig>,
    epoch: usize,
    step: usize,
    best_metric: Option<f64>,
    rng: Option<RngState>,
    config_digest: String,
    params: Vec<TensorEntry>,
    optimizer_t: Option<u64>,
    moments: Vec<String>,
}

/// SHA-256 of the canonical JSON of the model and training configs.
pub fn config_digest(model: &ModelConfig, train: Option<&TrainConfig>) -> String {
    let text = serde_json::to_string(&(model, train)).expect("configs serialize");
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

fn push_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    for v in nn::to_vec1(t)? {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: msg.into(),
    }
}

impl Checkpoint {
    pub fn digest(&self) -> String {
        config_digest(&self.model_config, self.train_config.as_ref())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let moments: Vec<String> = match &self.optimizer {
            Some(s) => s.m.keys().filter(|k| s.v.contains_key(*k)).cloned().collect(),
            None => Vec::new(),
        };
        let header = Header {
            model_config: self.model_config.clone(),
            task: self.task,
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            step: self.step,
            best_metric: self.best_metric,
            rng: self.rng,
            config_digest: self.digest(),
            params: self
                .params
                .iter()
                .map(|(k, t)| TensorEntry {
                    name: k.clone(),
                    shape: t.dims().to_vec(),
                })
                .collect(),
            optimizer_t: self.optimizer.as_ref().map(|s| s.t),
            moments,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::validation(e.to_string()))?;
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.params.values() {
            push_tensor(&mut buf, t)?;
        }
        if let Some(s) = &self.optimizer {
            for name in &header.moments {
                push_tensor(&mut buf, &s.m[name])?;
                push_tensor(&mut buf, &s.v[name])?;
            }
        }
        Ok(buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad(path, "not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(path, format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(path, format!("header: {e}")))?;
        let digest = config_digest(&header.model_config, header.train_config.as_ref());
        if digest != header.config_digest {
            return Err(bad(path, "config digest does not match the embedded configuration"));
        }
        let mut pos = 16 + hlen;
        let mut take = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let end = pos + 8 * n;
            let raw = bytes.get(pos..end).ok_or_else(|| bad(path, "truncated tensor data"))?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos = end;
            Ok(Tensor::from_vec(values, shape, &device())?)
        };
        let mut params = BTreeMap::new();
        for e in &header.params {
            params.insert(e.name.clone(), take(&e.shape)?);
        }
        let optimizer = match header.optimizer_t {
            Some(t) => {
                let mut state = AdamState {
                    t,
                    ..AdamState::default()
                };
                for name in &header.moments {
                    let shape = params
                        .get(name)
                        .ok_or_else(|| bad(path, format!("moment for unknown parameter {name}")))?
                        .dims()
                        .to_vec();
                    state.m.insert(name.clone(), take(&shape)?);
                    state.v.insert(name.clone(), take(&shape)?);
                }
                Some(state)
            }
            None => None,
        };
        if pos != bytes.len() {
            return Err(bad(path, "trailing bytes after tensor data"));
        }
        Ok(Self {
            model_config: header.model_config,
            task: header.task,
            train_config: header.train_config,
            params,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            best_metric: header.best_metric,
            rng: header.rng,
        })
    }
}
