//! Fingerprinted checkpoints tying trained parameters to the exact panel
//! and configuration that produced them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::panel::hex;
use crate::data::samples::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{CastNet, ModelConfig};
use crate::training::trainer::TrainConfig;

pub const CHECKPOINT_FORMAT: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON encoding of `value`.
pub fn fingerprint_of<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?))
}

/// Everything that determines a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunIdentity {
    pub panel_fingerprint: String,
    pub split: SplitSpec,
    pub train: TrainConfig,
}

impl RunIdentity {
    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_of(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    /// Fingerprint of `identity`.
    pub config_fingerprint: String,
    pub identity: RunIdentity,
    pub model: ModelConfig,
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn new(identity: RunIdentity, model: &CastNet) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT,
            config_fingerprint: identity.fingerprint()?,
            identity,
            model: model.config.clone(),
            params: model.params.to_checkpoint(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads and checks that the stored fingerprint matches the stored identity.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Self = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                reason: format!("unsupported checkpoint format {}", ckpt.format),
            });
        }
        let found = ckpt.identity.fingerprint()?;
        if found != ckpt.config_fingerprint {
            return Err(Error::Fingerprint {
                expected: ckpt.config_fingerprint,
                found,
            });
        }
        Ok(ckpt)
    }

    /// Refuses a panel other than the one the checkpoint was trained on.
    pub fn verify_panel(&self, panel_fingerprint: &str) -> Result<()> {
        if self.identity.panel_fingerprint != panel_fingerprint {
            return Err(Error::Fingerprint {
                expected: self.identity.panel_fingerprint.clone(),
                found: panel_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn model(&self) -> Result<CastNet> {
        CastNet::from_checkpoint(self.model.clone(), &self.params)
    }
}
