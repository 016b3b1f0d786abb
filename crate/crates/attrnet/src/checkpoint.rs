//! Versioned binary checkpoint files.
//!
//! Layout: magic `ATRN`, little-endian u32 format version, little-endian
//! u64 header length, a UTF-8 JSON header (model config, training
//! metadata, and a tensor directory with byte offsets), then the raw
//! little-endian f32 tensor payloads. Round trips are bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;
use crate::data::AttributeSchema;
use crate::model::{ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ATRN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Class names and attribute groups the model was trained on.
    pub schema: AttributeSchema,
    pub params: ParamSet<f32>,
    /// SGD momentum buffers, keyed like `params` (empty before training).
    pub momentum: ParamSet<f32>,
    pub epoch: u32,
    pub learning_rate: f64,
    /// Per-channel training-set mean, subtracted during preprocessing.
    pub mean_rgb: [f64; 3],
    /// Resize target used before cropping to the model input size.
    pub canonical_size: u32,
    /// Master seed of the training run (RNG substreams derive from it).
    pub rng_seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    schema: AttributeSchema,
    epoch: u32,
    learning_rate: f64,
    mean_rgb: [f64; 3],
    canonical_size: u32,
    rng_seed: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: u64,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, params: ParamSet<f32>) -> Self {
        Checkpoint {
            config,
            schema: AttributeSchema::default(),
            params,
            momentum: ParamSet::new(),
            epoch: 0,
            learning_rate: 0.0,
            mean_rgb: [0.0; 3],
            canonical_size: 0,
            rng_seed: 0,
        }
    }

    /// Validates that every parameter the config demands is present with
    /// the right shape (momentum buffers, when present, must mirror them).
    pub fn validate(&self) -> Result<()> {
        if self.schema.num_classes() != self.config.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "schema lists {} classes, config expects {}",
                self.schema.num_classes(),
                self.config.num_classes
            )));
        }
        let expected = self.config.param_shapes()?;
        if expected.len() != self.params.len() {
            return Err(Error::ConfigMismatch(format!(
                "config expects {} parameter tensors, checkpoint has {}",
                expected.len(),
                self.params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = self.params.get(name).ok_or_else(|| {
                Error::ConfigMismatch(format!("checkpoint is missing parameter {name}"))
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ConfigMismatch(format!(
                    "parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )));
            }
            if let Some(m) = self.momentum.get(name) {
                if m.shape() != shape.as_slice() {
                    return Err(Error::ConfigMismatch(format!(
                        "momentum buffer {name} has shape {:?}, config expects {shape:?}",
                        m.shape()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let push_set = |prefix: &str, set: &ParamSet<f32>, entries: &mut Vec<TensorEntry>,
                            payload: &mut Vec<u8>| {
            for (name, tensor) in set.iter() {
                entries.push(TensorEntry {
                    name: format!("{prefix}/{name}"),
                    shape: tensor.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for v in tensor.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push_set("params", &self.params, &mut entries, &mut payload);
        push_set("momentum", &self.momentum, &mut entries, &mut payload);

        let header = Header {
            config: self.config.clone(),
            schema: self.schema.clone(),
            epoch: self.epoch,
            learning_rate: self.learning_rate,
            mean_rgb: self.mean_rgb,
            canonical_size: self.canonical_size,
            rng_seed: self.rng_seed,
            tensors: entries,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| Error::Config(format!("checkpoint header serialization: {e}")))?;

        let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 || &bytes[0..4] != MAGIC {
            return Err(Error::corrupt(path, "missing ATRN magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                supported: VERSION,
            });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let payload_start = 16usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..payload_start])
            .map_err(|e| Error::corrupt(path, format!("bad JSON header: {e}")))?;
        header
            .config
            .validate()
            .map_err(|e| Error::corrupt(path, format!("invalid embedded config: {e}")))?;

        let payload = &bytes[payload_start..];
        let mut params = ParamSet::new();
        let mut momentum = ParamSet::new();
        for entry in &header.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(numel * 4)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| {
                    Error::corrupt(path, format!("truncated payload for tensor {}", entry.name))
                })?;
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let tensor = Tensor::new(entry.shape.clone(), data)
                .map_err(|e| Error::corrupt(path, format!("tensor {}: {e}", entry.name)))?;
            match entry.name.split_once('/') {
                Some(("params", key)) => params.insert(key, tensor),
                Some(("momentum", key)) => momentum.insert(key, tensor),
                _ => {
                    return Err(Error::corrupt(
                        path,
                        format!("unknown tensor section in {}", entry.name),
                    ))
                }
            }
        }

        let ckpt = Checkpoint {
            config: header.config,
            schema: header.schema,
            params,
            momentum,
            epoch: header.epoch,
            learning_rate: header.learning_rate,
            mean_rgb: header.mean_rgb,
            canonical_size: header.canonical_size,
            rng_seed: header.rng_seed,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fsutil::atomic_write(path, &checkpoint.to_bytes()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fsutil::read_bytes(path)?;
    Checkpoint::from_bytes(&bytes, path)
}
