//! Checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic b"HSANETCK"
//! 8       4     format version, u32 LE (currently 1)
//! 12      8     header length L, u64 LE
//! 20      L     UTF-8 JSON header
//! 20+L    ...   tensor payload: f64 LE values, tensors back to back in
//!               header order, each row-major
//! ```
//!
//! The JSON header holds the model config, the optional training config,
//! the step counters, one `{name, group, shape}` record per tensor (`group`
//! is `param` or `momentum`) and the SHA-256 of the payload in hex.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HsaNet, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"HSANETCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorGroup {
    Param,
    Momentum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    group: TensorGroup,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: Option<TrainConfig>,
    step: u64,
    total_steps: u64,
    tensors: Vec<TensorRecord>,
    payload_sha256: String,
}

/// Everything needed to rebuild a network and resume training.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub total_steps: u64,
    /// Parameters in registration order.
    pub params: Vec<(String, Tensor)>,
    /// Optimizer momentum buffers, aligned with `params`; empty when absent.
    pub momentum: Vec<Tensor>,
}

impl Checkpoint {
    /// A checkpoint of freshly built or trained parameters without
    /// optimizer state.
    pub fn from_store(model: &ModelConfig, store: &ParamStore) -> Self {
        Checkpoint {
            model: model.clone(),
            train: None,
            step: 0,
            total_steps: 0,
            params: store.entries().iter().map(|e| (e.name.clone(), e.value.clone())).collect(),
            momentum: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if !self.momentum.is_empty() && self.momentum.len() != self.params.len() {
            return Err(Error::Format("momentum buffers do not match parameters".into()));
        }
        let mut tensors = Vec::with_capacity(self.params.len() + self.momentum.len());
        let mut payload = Vec::new();
        for (name, t) in &self.params {
            tensors.push(TensorRecord {
                name: name.clone(),
                group: TensorGroup::Param,
                shape: t.shape().to_vec(),
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        for ((name, p), t) in self.params.iter().zip(&self.momentum) {
            if p.shape() != t.shape() {
                return Err(Error::Format(format!("momentum for `{name}` has the wrong shape")));
            }
            tensors.push(TensorRecord {
                name: name.clone(),
                group: TensorGroup::Momentum,
                shape: t.shape().to_vec(),
            });
            payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            total_steps: self.total_steps,
            tensors,
            payload_sha256: hex::encode(Sha256::digest(&payload)),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
            return Err(Error::Format("payload checksum mismatch".into()));
        }
        let expected: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header describes {expected}",
                payload.len()
            )));
        }
        let mut params = Vec::new();
        let mut momentum = Vec::new();
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for rec in header.tensors {
            let n: usize = rec.shape.iter().product();
            let t = Tensor::new(&rec.shape, chunks.by_ref().take(n).collect())?;
            match rec.group {
                TensorGroup::Param => params.push((rec.name, t)),
                TensorGroup::Momentum => {
                    if params.get(momentum.len()).map(|(n, _)| n) != Some(&rec.name) {
                        return Err(Error::Format(format!("momentum `{}` out of order", rec.name)));
                    }
                    momentum.push(t)
                }
            }
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            step: header.step,
            total_steps: header.total_steps,
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes()?)?;
        f.sync_all()?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::ingestion(path, e.to_string()))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the network and copies the stored parameters in, checking
    /// names and shapes against the architecture.
    pub fn restore(&self) -> Result<(HsaNet, ParamStore)> {
        let (net, mut store) = HsaNet::build(&self.model)?;
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, architecture has {}",
                self.params.len(),
                store.len()
            )));
        }
        for (i, (name, t)) in self.params.iter().enumerate() {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown tensor `{name}`")))?;
            if id.index() != i {
                return Err(Error::Format(format!("tensor `{name}` out of order")));
            }
            store
                .set_value(id, t.clone())
                .map_err(|e| Error::Format(format!("`{name}`: {e}")))?;
        }
        Ok((net, store))
    }
}
