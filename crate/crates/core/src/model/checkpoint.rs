//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "DDCLCKPT" | version u32 | header_len u64 | header (JSON)
//! | tensor payload (f32, in header order) | SHA-256 of everything before
//! ```
//!
//! The header holds the model config, a snapshot of the training config,
//! the step counter and seed, and the tensor index.  No wall-clock data is
//! stored, so identical runs give identical files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::TensorKind;
use super::{ModelConfig, Network, TensorRecord};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DDCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Param,
    Buffer,
    /// Optimizer state, e.g. momentum buffers.
    Optimizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Training configuration snapshot; opaque to this module.
    pub training: serde_json::Value,
    /// Optimizer steps completed.
    pub step: u64,
    /// Root seed; every random draw is derived from it and a stream id.
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: TensorRole,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<StoredTensor>,
}

fn role_of(kind: TensorKind) -> TensorRole {
    match kind {
        TensorKind::Param => TensorRole::Param,
        TensorKind::Buffer => TensorRole::Buffer,
    }
}

impl Checkpoint {
    pub fn from_network(net: &Network, training: serde_json::Value, step: u64, seed: u64) -> Self {
        let tensors = net
            .state()
            .into_iter()
            .map(|r| StoredTensor {
                name: r.name,
                role: role_of(r.kind),
                shape: r.shape,
                data: r.value,
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                model: net.config.clone(),
                training,
                step,
                seed,
            },
            tensors,
        }
    }

    /// Rebuilds the network and loads its parameters and buffers.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::new(&self.meta.model, self.meta.seed)?;
        let records: Vec<TensorRecord> = self
            .tensors
            .iter()
            .filter(|t| t.role != TensorRole::Optimizer)
            .map(|t| TensorRecord {
                name: t.name.clone(),
                kind: match t.role {
                    TensorRole::Buffer => TensorKind::Buffer,
                    _ => TensorKind::Param,
                },
                shape: t.shape.clone(),
                value: t.data.clone(),
            })
            .collect();
        net.load_state(&records)?;
        Ok(net)
    }

    pub fn optimizer_tensors(&self) -> impl Iterator<Item = &StoredTensor> {
        self.tensors.iter().filter(|t| t.role == TensorRole::Optimizer)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    role: t.role,
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(8 + 4 + 8 + header.len() + payload + 32);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |offset: usize, reason: String| Error::Malformed {
            path: origin.to_path_buf(),
            offset: offset as u64,
            reason,
        };
        if bytes.len() < 8 + 4 + 8 + 32 {
            return Err(bad(0, format!("file too short for a checkpoint ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad(0, "bad magic".into()));
        }
        let body_len = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_len]);
        if digest.as_slice() != &bytes[body_len..] {
            return Err(bad(body_len, "integrity hash mismatch".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(8, format!("unsupported checkpoint version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body_len)
            .ok_or_else(|| bad(12, format!("header length {header_len} exceeds file")))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..header_end]).map_err(|e| bad(20, format!("header: {e}")))?;
        let mut pos = header_end;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let end = pos + n * 4;
            if end > body_len {
                return Err(bad(pos, format!("tensor {} truncated", entry.name)));
            }
            let data = bytes[pos..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(StoredTensor {
                name: entry.name,
                role: entry.role,
                shape: entry.shape,
                data,
            });
            pos = end;
        }
        if pos != body_len {
            return Err(bad(pos, format!("{} trailing bytes after tensors", body_len - pos)));
        }
        Ok(Self {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Hex SHA-256 of the serialized checkpoint, used as provenance.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Hex SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}
