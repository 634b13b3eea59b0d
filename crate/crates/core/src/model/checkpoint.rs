use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ModelParams};
use crate::corpus::Vocabulary;
use crate::numerics::Tensor;

pub const CHECKPOINT_FORMAT: &str = "dualdec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("not a checkpoint (format {0:?})")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("vocabulary sizes {src}/{tgt} do not match the configuration")]
    VocabMismatch { src: usize, tgt: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Parameters together with the vocabularies they were trained against.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    #[serde(flatten)]
    tensor: Tensor,
}

#[derive(Serialize, Deserialize)]
struct Stored {
    format: String,
    version: u32,
    config: ModelConfig,
    source_vocab: Vocabulary,
    target_vocab: Vocabulary,
    tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String, CheckpointError> {
        let stored = Stored {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.params.config.clone(),
            source_vocab: self.source_vocab.clone(),
            target_vocab: self.target_vocab.clone(),
            tensors: self
                .params
                .names()
                .iter()
                .zip(self.params.tensors())
                .map(|(n, t)| NamedTensor {
                    name: n.clone(),
                    tensor: t.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&stored)?)
    }

    pub fn from_json(s: &str) -> Result<Self, CheckpointError> {
        let stored: Stored = serde_json::from_str(s)?;
        if stored.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(stored.format));
        }
        if stored.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(stored.version));
        }
        let (src, tgt) = (stored.source_vocab.len(), stored.target_vocab.len());
        if src != stored.config.src_vocab || tgt != stored.config.tgt_vocab {
            return Err(CheckpointError::VocabMismatch { src, tgt });
        }
        let named = stored.tensors.into_iter().map(|n| (n.name, n.tensor)).collect();
        Ok(Self {
            params: ModelParams::from_named(stored.config, named)?,
            source_vocab: stored.source_vocab,
            target_vocab: stored.target_vocab,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
