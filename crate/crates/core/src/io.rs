//! Binary weight files and deterministic test models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        4 bytes   "STLM"
//! version      u32       FORMAT_VERSION
//! header_len   u64       byte length of the JSON header
//! header       UTF-8 JSON {config: {...}, tensors: [{name, shape, dtype, byte_offset}]}
//! payload      row-major little-endian f32 tensors; offsets relative to payload start
//! ```
//!
//! The tied token embedding is stored once as `wte` and duplicated into the
//! input and output tables on load.

use std::collections::{HashMap, HashSet};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{tensor_shapes, ModelConfig, Weights};
use crate::rng::Xoshiro256;

pub const MAGIC: &[u8; 4] = b"STLM";
pub const FORMAT_VERSION: u32 = 1;

/// Standard deviation of randomly initialised test-model parameters.
pub const TEST_MODEL_STD: f64 = 0.02;

const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("weight file truncated: {what}"),
    ))
}

/// Serializes a model to the exact bytes [`write_model`] would produce.
pub fn encode_model(config: &ModelConfig, weights: &Weights) -> Result<Vec<u8>> {
    weights.validate(config)?;
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for ((name, shape), (_, data)) in tensor_shapes(config)
        .into_iter()
        .zip(weights.named_tensors())
    {
        tensors.push(TensorEntry {
            name,
            shape,
            dtype: "f32".into(),
            byte_offset: offset,
        });
        offset += data.len() as u64 * 4;
    }
    let header = serde_json::to_vec(&FileHeader {
        config: config.clone(),
        tensors,
    })
    .map_err(|e| Error::Format(e.to_string()))?;

    let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, data) in weights.named_tensors() {
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_model(path: impl AsRef<Path>, config: &ModelConfig, weights: &Weights) -> Result<()> {
    let bytes = encode_model(config, weights)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Parses and fully validates a weight file held in memory.
pub fn decode_model(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    if bytes.len() < PREAMBLE_LEN {
        if bytes.len() >= 4 && &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        return Err(truncated("preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| truncated("header"))? as usize;
    let header: FileHeader = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| Error::Format(format!("invalid header: {e}")))?;
    let payload = &bytes[header_end..];
    let config = header.config;
    config.validate()?;

    let expected: HashMap<String, Vec<usize>> = tensor_shapes(&config).into_iter().collect();
    let mut seen = HashSet::new();
    let mut extents = Vec::new();
    for entry in &header.tensors {
        let Some(shape) = expected.get(&entry.name) else {
            return Err(Error::validation(format!(
                "unexpected tensor {}",
                entry.name
            )));
        };
        if !seen.insert(entry.name.as_str()) {
            return Err(Error::validation(format!(
                "tensor {} listed twice",
                entry.name
            )));
        }
        if entry.dtype != "f32" {
            return Err(Error::validation(format!(
                "tensor {} has dtype {}, only f32 is supported",
                entry.name, entry.dtype
            )));
        }
        if &entry.shape != shape {
            return Err(Error::validation(format!(
                "tensor {} has shape {:?}, expected {:?}",
                entry.name, entry.shape, shape
            )));
        }
        let len = shape.iter().product::<usize>() as u64 * 4;
        let end = entry
            .byte_offset
            .checked_add(len)
            .ok_or_else(|| truncated(&entry.name))?;
        if end > payload.len() as u64 {
            return Err(truncated(&entry.name));
        }
        extents.push((entry.byte_offset, end, entry.name.as_str()));
    }
    if let Some((name, _)) = expected
        .iter()
        .find(|(name, _)| !seen.contains(name.as_str()))
    {
        return Err(Error::validation(format!("missing tensor {name}")));
    }
    extents.sort();
    for pair in extents.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::validation(format!(
                "tensors {} and {} overlap",
                pair[0].2, pair[1].2
            )));
        }
    }

    let offsets: HashMap<&str, usize> = header
        .tensors
        .iter()
        .map(|e| (e.name.as_str(), e.byte_offset as usize))
        .collect();
    let mut weights = Weights::zeros(&config);
    for (name, dst) in weights.named_tensors_mut() {
        let start = offsets[name.as_str()];
        let bytes = &payload[start..start + 4 * dst.len()];
        for (v, chunk) in dst.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    weights.tie_embeddings();
    weights.validate(&config)?;
    Ok((config, weights))
}

pub fn read_model(path: impl AsRef<Path>) -> Result<(ModelConfig, Weights)> {
    let bytes = std::fs::read(path)?;
    decode_model(&bytes)
}

/// Random GPT-2-style initialisation: matrices and embeddings drawn from
/// normal(0, 0.02) in canonical tensor order, layernorm gains 1, biases 0.
pub fn make_test_model(config: &ModelConfig, seed: u64) -> Weights {
    let mut rng = Xoshiro256::seed_from_u64(seed);
    let mut weights = Weights::zeros(config);
    for (name, tensor) in weights.named_tensors_mut() {
        if name.ends_with(".bias") {
            continue;
        }
        if name.starts_with("ln_f") || name.contains(".ln_") {
            tensor.iter_mut().for_each(|v| *v = 1.0);
            continue;
        }
        for v in tensor.iter_mut() {
            *v = (rng.next_normal() * TEST_MODEL_STD) as f32;
        }
    }
    weights.tie_embeddings();
    weights
}

/// All-zero weights; every input yields uniform next-token distributions.
pub fn make_zero_model(config: &ModelConfig) -> Weights {
    Weights::zeros(config)
}
