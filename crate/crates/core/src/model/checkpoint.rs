//! `MMCK1` checkpoints: magic, `u32` little-endian header length, UTF-8 JSON header,
//! then every parameter array as little-endian `f64` in header-declared order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, MultimodalModel};
use crate::aggregation::Strategy;
use crate::autodiff::{ArraySpec, ParameterSet};
use crate::distributions::RngState;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MMCK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
    pub epoch: u64,
    pub rng_state: RngState,
    pub init_scheme: String,
    /// Echo of the run configuration that produced this checkpoint.
    #[serde(default)]
    pub run_config: Option<serde_json::Value>,
    pub arrays: Vec<ArraySpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: MultimodalModel,
}

impl Checkpoint {
    pub fn new(model: MultimodalModel, beta: f64, seed: u64, epoch: u64, rng_state: RngState) -> Self {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            model_config: model.config.clone(),
            strategy: model.config.strategy,
            beta,
            seed,
            epoch,
            rng_state,
            init_scheme: super::INIT_SCHEME.to_string(),
            run_config: None,
            arrays: model.params.specs(),
        };
        Self { header, model }
    }
}

fn format_err<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format { offset: offset as u64, message: message.into() })
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut header = ckpt.header.clone();
    header.arrays = ckpt.model.params.specs();
    header.model_config = ckpt.model.config.clone();
    header.strategy = ckpt.model.config.strategy;
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(9 + json.len() + ckpt.model.params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&ckpt.model.params.to_le_bytes());
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 5 {
        return format_err(bytes.len(), "truncated before magic");
    }
    if &bytes[..5] != CHECKPOINT_MAGIC {
        return format_err(0, "bad magic, expected MMCK1");
    }
    if bytes.len() < 9 {
        return format_err(bytes.len(), "truncated header length");
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = 9 + len;
    if bytes.len() < body {
        return format_err(bytes.len(), format!("truncated header: {len} bytes declared"));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[9..body]).map_err(|e| Error::Format { offset: 9, message: format!("bad header json: {e}") })?;
    if header.format_version != CHECKPOINT_VERSION {
        return format_err(9, format!("unsupported checkpoint version {}", header.format_version));
    }
    if header.strategy != header.model_config.strategy {
        return Err(Error::Validation("header strategy disagrees with model config".into()));
    }
    let params = ParameterSet::from_le_bytes(&header.arrays, &bytes[body..], body as u64)?;
    let model = MultimodalModel::from_parts(header.model_config.clone(), params)?;
    Ok(Checkpoint { header, model })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, write_checkpoint(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&fs::read(path)?)
}
