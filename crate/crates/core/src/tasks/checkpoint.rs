//! Binary checkpoint container.
//!
//! Layout: magic `MKDC`, u32 LE format version, u64 LE metadata length,
//! UTF-8 JSON metadata, then every parameter tensor as raw LE f64 in the
//! order of the metadata's tensor registry.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::net::{Architecture, NetworkParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MKDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub config: TrainConfig,
    pub params: NetworkParams,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters are stored.
    pub best_epoch: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    architecture: Architecture,
    config: TrainConfig,
    history: Vec<EpochRecord>,
    best_epoch: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, shape, data)| {
                let e = TensorEntry {
                    name,
                    shape,
                    offset,
                    len: data.len(),
                };
                offset += 8 * data.len() as u64;
                e
            })
            .collect();
        let meta = Metadata {
            architecture: self.arch,
            config: self.config.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            tensors,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in self.params.tensors() {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("missing MKDC magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("metadata length exceeds file size"))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..data_start])?;
        meta.architecture.validate()?;
        let data = &bytes[data_start..];
        let mut params = NetworkParams::zeros(&meta.architecture);
        let expected = params.tensors();
        if expected.len() != meta.tensors.len() {
            return Err(bad("tensor registry does not match the architecture"));
        }
        for ((name, shape, _), entry) in expected.iter().zip(&meta.tensors) {
            if *name != entry.name
                || *shape != entry.shape
                || shape.iter().product::<usize>() != entry.len
            {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has an unexpected shape",
                    entry.name
                )));
            }
        }
        for (dst, entry) in params.tensors_mut().into_iter().zip(&meta.tensors) {
            let start = entry.offset as usize;
            let end = start + 8 * entry.len;
            if end > data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is truncated",
                    entry.name
                )));
            }
            for (d, chunk) in dst.iter_mut().zip(data[start..end].chunks_exact(8)) {
                *d = f64::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        if !params.all_finite() {
            return Err(bad("non-finite parameter values"));
        }
        Ok(Checkpoint {
            arch: meta.architecture,
            config: meta.config,
            params,
            history: meta.history,
            best_epoch: meta.best_epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
