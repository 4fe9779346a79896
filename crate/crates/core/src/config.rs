//! Declarative run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::WorldConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSourceKind {
    /// Fixed distinct 4-token signature per phoneme.
    #[default]
    PhonemeTable,
    /// Synthesized audio features quantized with a fitted codebook.
    Codebook,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Codebook size `V`; the pad id is `V`.
    pub size: usize,
    pub iters: usize,
    /// Audio feature vectors drawn for fitting.
    pub fit_samples: usize,
    pub token_source: TokenSourceKind,
    /// Defaults to `<out>/tokenizer/codebook.bin`.
    pub codebook: Option<PathBuf>,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig {
            size: 64,
            iters: 25,
            fit_samples: 4000,
            token_source: TokenSourceKind::PhonemeTable,
            codebook: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Eval samples whose attention maps are recorded.
    pub attention_samples: usize,
    /// Method name treated as the baseline in homophene reports.
    pub vanilla: String,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            attention_samples: 100,
            vanilla: "vanilla".into(),
        }
    }
}

/// `train.seed` is the base seed of every command; `--seed` overrides it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub quantizer: QuantizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.quantizer.size == 0 || self.quantizer.size >= u16::MAX as usize {
            return Err(Error::Config(format!("quantizer.size {} outside 1..65535", self.quantizer.size)));
        }
        if self.train.mode != self.world.dataset.mode {
            return Err(Error::Config(format!(
                "train.mode {:?} differs from world.dataset.mode {:?}",
                self.train.mode, self.world.dataset.mode
            )));
        }
        Ok(())
    }
}
