//! Versioned checkpoint container. JSON keeps the format inspectable; f64
//! values round-trip bit-exactly through serde_json's shortest-representation
//! printing.

use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    MaskedLm,
    Autoregressive,
    Policy,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub payload: T,
}

pub fn save_checkpoint<T: Serialize>(path: &Path, kind: CheckpointKind, payload: &T) -> Result<()> {
    let ckpt = Checkpoint {
        format: "seqgen-checkpoint".to_string(),
        version: CHECKPOINT_VERSION,
        kind,
        payload,
    };
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, kind: CheckpointKind) -> Result<T> {
    let data = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint<T> = serde_json::from_str(&data)
        .map_err(|e| Error::Checkpoint(format!("parse failed: {e}")))?;
    if ckpt.format != "seqgen-checkpoint" {
        return Err(Error::Checkpoint(format!("unknown format {:?}", ckpt.format)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
    }
    if ckpt.kind != kind {
        return Err(Error::Checkpoint(format!("expected {kind:?}, found {:?}", ckpt.kind)));
    }
    Ok(ckpt.payload)
}
