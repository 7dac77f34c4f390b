//! `EVCK` checkpoints: named parameter matrices as `f32` plus JSON metadata.
//!
//! Layout (little-endian): `b"EVCK"`, `u32` version, `u32` metadata length,
//! metadata JSON, `u32` parameter count, then per parameter a `u32` name
//! length, the UTF-8 name, `u32` rows, `u32` cols and `rows * cols` `f32`.

use std::path::{Path, PathBuf};

use evostruct_core::config::RunConfig;
use evostruct_core::{Mat, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    /// 0 before training; otherwise the 1-based phase just finished.
    pub phase: usize,
    /// Epochs run in that phase.
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(
        "checkpoint was trained with config {found}, but the supplied config hashes to {expected}"
    )]
    ConfigHashMismatch { expected: String, found: String },
    #[error("parameter {0} is missing from the checkpoint")]
    MissingParam(String),
    #[error("checkpoint parameter {0} is not part of the model")]
    UnexpectedParam(String),
    #[error("parameter {name}: checkpoint has {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
}

/// Hex SHA-256 of the compact JSON encoding of `cfg`.
pub fn config_hash(cfg: &RunConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Mat)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: CheckpointMeta) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        Checkpoint { meta, params }
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        let mut out = Vec::new();
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        out.extend_from_slice(MAGIC);
        u32le(&mut out, VERSION as usize);
        u32le(&mut out, meta.len());
        out.extend_from_slice(&meta);
        u32le(&mut out, self.params.len());
        for (name, m) in &self.params {
            u32le(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            u32le(&mut out, m.rows());
            u32le(&mut out, m.cols());
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err("missing EVCK header".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| format!("metadata: {e}"))?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| "parameter name is not UTF-8".to_string())?;
            let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
            let data = r
                .take(4 * rows * cols)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.push((name, Mat::from_vec(rows, cols, data)));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.into(),
            source,
        })?;
        Self::decode(&bytes).map_err(|message| CheckpointError::Format {
            path: path.into(),
            message,
        })
    }

    pub fn verify_config(&self, cfg: &RunConfig) -> Result<(), CheckpointError> {
        let expected = config_hash(cfg);
        if expected != self.meta.config_hash {
            return Err(CheckpointError::ConfigHashMismatch {
                expected,
                found: self.meta.config_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Copies every parameter into `store`; names and shapes must match exactly.
    pub fn apply(&self, store: &mut ParamStore) -> Result<(), CheckpointError> {
        for (name, _) in &self.params {
            if store.id(name).is_none() {
                return Err(CheckpointError::UnexpectedParam(name.clone()));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            let m = self
                .get(&p.name)
                .ok_or_else(|| CheckpointError::MissingParam(p.name.clone()))?;
            if m.shape() != p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.value.shape(),
                    found: m.shape(),
                });
            }
            p.value = m.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or("truncated file")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
