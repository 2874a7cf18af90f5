use std::io;

use ewip_core::{
    checkpoint::CheckpointError, ddpg::DdpgError, environment::EnvError, mpc::MpcError,
    ppo::PpoError,
};
use thiserror::Error;

/// Harness errors split by exit code: validation problems are caught before
/// any compute, everything else is a runtime failure.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("empty trace: nothing to score")]
    EmptyTrace,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ddpg(#[from] DdpgError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    pub fn validation(msg: impl Into<String>) -> Self {
        Self::Validation(msg.into())
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, Self::Validation(_))
    }
}
