//! Versioned JSON container for trained agents.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so save/load is bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
    #[error("expected a {expected} checkpoint, found {found}")]
    WrongKind { expected: String, found: String },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Envelope<T> {
    kind: String,
    version: u32,
    payload: T,
}

#[derive(Deserialize)]
struct Header {
    kind: String,
    version: u32,
}

pub fn to_string<T: Serialize>(kind: &str, payload: &T) -> Result<String, CheckpointError> {
    Ok(serde_json::to_string(&Envelope {
        kind: kind.to_string(),
        version: FORMAT_VERSION,
        payload,
    })?)
}

pub fn from_str<T: DeserializeOwned>(kind: &str, text: &str) -> Result<T, CheckpointError> {
    let header: Header = serde_json::from_str(text)?;
    if header.kind != kind {
        return Err(CheckpointError::WrongKind {
            expected: kind.to_string(),
            found: header.kind,
        });
    }
    if header.version != FORMAT_VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    let env: Envelope<T> = serde_json::from_str(text)?;
    Ok(env.payload)
}

/// Read only the `kind` tag of a checkpoint file.
pub fn peek_kind(text: &str) -> Result<String, CheckpointError> {
    let header: Header = serde_json::from_str(text)?;
    Ok(header.kind)
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<(), CheckpointError> {
    fs::write(path, to_string(kind, payload)?)?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, CheckpointError> {
    from_str(kind, &fs::read_to_string(path)?)
}
