//! Single-file model snapshots.
//!
//! Layout: the 8-byte magic `ASLCKPT1`, a little-endian `u64` header length,
//! a JSON header (model configuration, loss weight, tensor names and shapes),
//! then every tensor's values as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelParams};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"ASLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    alpha: f64,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

/// Trained parameters plus the loss weight they were trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub alpha: f64,
}

fn entries(params: &ModelParams) -> Vec<Entry> {
    params
        .named_trainable()
        .into_iter()
        .chain(params.named_buffers())
        .map(|(name, t)| Entry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.params.config.clone(),
            alpha: self.alpha,
            tensors: entries(&self.params),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * self.params.parameter_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.named_trainable().into_iter().chain(self.params.named_buffers()) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |why: &str| Error::Format(format!("checkpoint: {why}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..).ok_or_else(|| bad("truncated"))?;
        if body.len() < len {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..len])?;
        // rebuild the structure from the config, then overwrite every value
        let mut params = ModelParams::init(header.config.clone(), 0)?;
        if entries(&params) != header.tensors {
            return Err(bad("tensor list does not match the configuration"));
        }
        let mut raw = body[len..].chunks_exact(8);
        let expected: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if raw.len() != expected || !raw.remainder().is_empty() {
            return Err(bad(&format!("expected {expected} values, found {} bytes", body.len() - len)));
        }
        for t in params.state_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(raw.next().expect("length checked").try_into().expect("8 bytes"));
            }
        }
        Ok(Self {
            params,
            alpha: header.alpha,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}
