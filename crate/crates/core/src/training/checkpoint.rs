//! Binary checkpoint format:
//!
//! ```text
//! "RSMN" | u32 version | u32 header length | JSON header | f32 blobs | u32 CRC32
//! ```
//!
//! Integers are little-endian. The header's tensor directory lists name,
//! shape and byte offset (relative to the first blob) in storage order. The
//! CRC covers every preceding byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, LossWeights, MetricRow, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"RSMN";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

/// Everything random in training derives from the seed and the epoch
/// counter, so these two values are the complete generator state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState>,
    pub loss_weights: LossWeights,
    /// Completed epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub history: Vec<MetricRow>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model_config: ModelConfig,
    train_config: TrainConfig,
    loss_weights: LossWeights,
    epoch: usize,
    rng: RngState,
    history: Vec<MetricRow>,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.clone(), t)).collect();
        if let Some(adam) = &self.adam {
            named.extend(adam.m.iter().map(|(n, t)| (format!("{ADAM_M}{n}"), t)));
            named.extend(adam.v.iter().map(|(n, t)| (format!("{ADAM_V}{n}"), t)));
        }
        let mut offset = 0u64;
        let tensors = named
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.len() as u64;
                e
            })
            .collect();
        let header = Header {
            model_config: self.model_config.clone(),
            train_config: self.train_config.clone(),
            loss_weights: self.loss_weights,
            epoch: self.epoch,
            rng: self.rng,
            history: self.history.clone(),
            adam_step: self.adam.as_ref().map(|a| a.t),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");

        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses checkpoint bytes; `origin` only labels error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let err = |m: String| format_err(origin, m);
        if bytes.len() < 16 {
            return Err(err(format!("truncated checkpoint ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(err("not a checkpoint (bad magic bytes)".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != CHECKPOINT_VERSION {
            return Err(err(format!(
                "unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let header_len = word(8) as usize;
        let body_end = bytes.len() - 4;
        if 12 + header_len > body_end {
            return Err(err("truncated checkpoint header".into()));
        }
        let stored_crc = word(body_end);
        if crc32fast::hash(&bytes[..body_end]) != stored_crc {
            return Err(err("checksum mismatch".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])
            .map_err(|e| err(format!("malformed header: {e}")))?;
        let blobs = &bytes[12 + header_len..body_end];

        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut expected_offset = 0u64;
        for e in header.tensors {
            if e.offset != expected_offset {
                return Err(err(format!("tensor {} at offset {}, expected {expected_offset}", e.name, e.offset)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * count;
            if end > blobs.len() {
                return Err(err(format!("tensor {} runs past the end of the data", e.name)));
            }
            let data = blobs[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(e.shape, data).map_err(|x| err(format!("tensor {}: {x}", e.name)))?;
            expected_offset = end as u64;
            if let Some(n) = e.name.strip_prefix(ADAM_M) {
                m.insert(n.to_string(), t);
            } else if let Some(n) = e.name.strip_prefix(ADAM_V) {
                v.insert(n.to_string(), t);
            } else {
                params.insert(e.name, t);
            }
        }
        if expected_offset as usize != blobs.len() {
            return Err(err(format!(
                "{} trailing data bytes after the last tensor",
                blobs.len() - expected_offset as usize
            )));
        }
        header.model_config.validate()?;
        let params = ModelParams::from_tensors(&header.model_config, params)
            .map_err(|x| err(format!("parameters do not match the stored config: {x}")))?;
        let adam = header.adam_step.map(|t| AdamState { t, m, v });
        Ok(Checkpoint {
            model_config: header.model_config,
            train_config: header.train_config,
            params,
            adam,
            loss_weights: header.loss_weights,
            epoch: header.epoch,
            rng: header.rng,
            history: header.history,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
