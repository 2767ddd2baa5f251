//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OOCN" | u32 format_version | u32 header_len | header JSON | payload | u32 CRC-32(payload)
//! ```
//!
//! The header holds the model config and a directory of tensors (name,
//! shape, byte offset into the payload). The payload is the tensors'
//! `f64` values back to back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"OOCN";
pub const CHECKPOINT_VERSION: u32 = 1;

const RUNNING_MEAN: &str = "head.bn.running_mean";
const RUNNING_VAR: &str = "head.bn.running_var";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint checksum failure: {0}")]
    Checksum(String),
    #[error("invalid checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    tensors: Vec<TensorEntry>,
    payload_bytes: usize,
}

fn named_tensors(params: &ModelParams) -> Vec<(String, Matrix)> {
    let mut v: Vec<(String, Matrix)> = params
        .tensors()
        .into_iter()
        .map(|t| (t.name.clone(), t.value.clone()))
        .collect();
    let k = params.head_stats.mean.len();
    v.push((
        RUNNING_MEAN.into(),
        Matrix::new(1, k, params.head_stats.mean.clone()).expect("shape"),
    ));
    v.push((
        RUNNING_VAR.into(),
        Matrix::new(1, k, params.head_stats.var.clone()).expect("shape"),
    ));
    v
}

/// Serializes parameters and config to checkpoint bytes.
pub fn encode_checkpoint(params: &ModelParams, config: &ModelConfig) -> Result<Vec<u8>, CheckpointError> {
    params.check_config(config)?;
    let tensors = named_tensors(params);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, m) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            offset: payload.len(),
        });
        for v in m.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        model_config: config.clone(),
        tensors: entries,
        payload_bytes: payload.len(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

/// Parses checkpoint bytes. Nothing is returned unless every check passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(bytes, 4).ok_or_else(|| CheckpointError::Header("truncated preamble".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_len =
        read_u32(bytes, 8).ok_or_else(|| CheckpointError::Header("truncated preamble".into()))? as usize;
    let header_end = 12 + header_len;
    let header_bytes = bytes
        .get(12..header_end)
        .ok_or_else(|| CheckpointError::Checksum("file shorter than its header".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| CheckpointError::Header(e.to_string()))?;

    let payload_end = header_end + header.payload_bytes;
    if bytes.len() != payload_end + 4 {
        return Err(CheckpointError::Checksum(format!(
            "expected {} bytes, file has {}",
            payload_end + 4,
            bytes.len()
        )));
    }
    let payload = &bytes[header_end..payload_end];
    let stored = read_u32(bytes, payload_end).expect("length checked");
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(CheckpointError::Checksum(format!(
            "stored CRC {stored:08x}, computed {actual:08x}"
        )));
    }

    let config = header.model_config;
    let mut params = ModelParams::init(&config, 0)?;
    let lookup = |name: &str| -> Result<Matrix, CheckpointError> {
        let e = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::Header(format!("missing tensor `{name}`")))?;
        let n = e.shape[0] * e.shape[1];
        let raw = payload
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| CheckpointError::Header(format!("tensor `{name}` out of bounds")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::new(e.shape[0], e.shape[1], data).map_err(|e| CheckpointError::Header(e.to_string()))
    };
    for t in params.tensors_mut() {
        let m = lookup(&t.name)?;
        if m.shape() != t.value.shape() {
            return Err(CheckpointError::Header(format!(
                "tensor `{}` has shape {:?}, config implies {:?}",
                t.name,
                m.shape(),
                t.value.shape()
            )));
        }
        t.value = m;
    }
    let k = config.score_len();
    let mean = lookup(RUNNING_MEAN)?;
    let var = lookup(RUNNING_VAR)?;
    if mean.shape() != (1, k) || var.shape() != (1, k) {
        return Err(CheckpointError::Header("running statistics shape".into()));
    }
    params.head_stats.mean = mean.into_data();
    params.head_stats.var = var.into_data();
    Ok((params, config))
}

pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params, config)?;
    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig), CheckpointError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
