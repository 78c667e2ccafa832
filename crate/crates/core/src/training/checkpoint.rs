//! JSON checkpoints guarded by a hash of the configuration that produced them.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{TrainState, TrainingConfig};
use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::latent::ModelConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub vocab: Vocab,
    pub state: TrainState,
}

/// SHA-256 over the canonical JSON of the model and training settings.
pub fn config_hash(model: &ModelConfig, training: &TrainingConfig) -> String {
    let json = serde_json::to_string(&(model, training)).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, serde_json::to_vec(self)?)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    /// Load and verify the version and config hash.
    pub fn load(path: &Path, expected_hash: &str) -> Result<Checkpoint> {
        let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        if ck.config_hash != expected_hash {
            // resuming under different settings is a configuration problem
            return Err(Error::Config(vec![format!(
                "checkpoint {} was written under another model/training configuration (hash {} vs {})",
                path.display(),
                ck.config_hash,
                expected_hash
            )]));
        }
        Ok(ck)
    }
}
