//! Parameter checkpoints: one line of JSON header, a newline, then the full
//! checkpoint vector as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Dims, ModelParams};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub dims: Dims,
    pub seed: u64,
    pub schema_version: u32,
}

pub fn encode_checkpoint(params: &ModelParams<f64>, seed: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        dims: params.dims(),
        seed,
        schema_version: CHECKPOINT_SCHEMA_VERSION,
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in params.checkpoint_vector() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, ModelParams<f64>)> {
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Schema("checkpoint header not terminated".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..split])?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Schema(format!(
            "checkpoint schema version {} unsupported (expected {CHECKPOINT_SCHEMA_VERSION})",
            header.schema_version
        )));
    }
    let body = &bytes[split + 1..];
    let expected = header.dims.checkpoint_len() * 8;
    if body.len() != expected {
        return Err(Error::Schema(format!(
            "checkpoint body has {} bytes, expected {expected}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let params = ModelParams::from_checkpoint_vector(header.dims, &values)?;
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f64>, seed: u64) -> Result<()> {
    fs::write(path, encode_checkpoint(params, seed)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ModelParams<f64>)> {
    decode_checkpoint(&fs::read(path)?)
}
