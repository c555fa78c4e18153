//! Checkpoint files: a JSON document tagged `"MCOMM1"` holding everything
//! needed to resume or evaluate a run.
//!
//! All randomness in training is drawn from substreams keyed by the run seed
//! and the epoch number, so `(seed, epoch)` is the complete RNG state.

use crate::config::ExperimentConfig;
use mcomm_core::gradcore::ParamStore;
use mcomm_core::protocol::{Protocol, ProtocolError};
use mcomm_core::training::{OptimizerState, Trainer};
use serde::{Deserialize, Serialize};
use std::io;
use std::path::Path;

pub const FORMAT: &str = "MCOMM1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Next epoch to draw from.
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub epoch: usize,
    pub config: ExperimentConfig,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub rng: RngState,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("not a checkpoint: format tag is {0:?}, expected \"MCOMM1\"")]
    Format(String),
    #[error("checkpoint does not match the protocol: {0}")]
    Mismatch(#[from] ProtocolError),
    #[error("checkpoint is inconsistent: {0}")]
    Inconsistent(String),
}

impl Checkpoint {
    pub fn capture(config: &ExperimentConfig, trainer: &Trainer) -> Self {
        Self {
            format: FORMAT.into(),
            epoch: trainer.epoch,
            config: config.clone(),
            params: trainer.params.clone(),
            optimizer: trainer.optimizer.clone(),
            rng: RngState { seed: trainer.config.seed, next_epoch: trainer.epoch + 1 },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    /// Parses and checks the tag and the stored parameters against the
    /// stored spec.
    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(FORMAT) => {}
            other => return Err(CheckpointError::Format(other.unwrap_or("<missing>").to_string())),
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        if ck.rng.seed != ck.config.training.seed || ck.rng.next_epoch != ck.epoch + 1 {
            return Err(CheckpointError::Inconsistent(format!(
                "rng state {:?} does not follow epoch {} with seed {}",
                ck.rng, ck.epoch, ck.config.training.seed
            )));
        }
        let protocol = ck.config.protocol().map_err(CheckpointError::Inconsistent)?;
        ck.check_against(&protocol)?;
        Ok(ck)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fails with the first parameter whose shape differs from `protocol`.
    pub fn check_against(&self, protocol: &Protocol) -> Result<(), CheckpointError> {
        protocol.check_params(&self.params)?;
        Ok(())
    }

    /// Rebuilds a trainer positioned right after the saved epoch.
    pub fn restore(&self) -> Result<Trainer, String> {
        let mut t = Trainer::new(self.config.env.clone(), self.config.protocol.clone(), self.config.training.clone())
            .map_err(|e| e.to_string())?;
        t.params = self.params.clone();
        t.optimizer = self.optimizer.clone();
        t.epoch = self.epoch;
        Ok(t)
    }
}
