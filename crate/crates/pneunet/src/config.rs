//! JSON run configuration (`pneunet config --print-default`).

use std::path::Path;

use pneunet_core::model::ModelConfig;
use pneunet_core::pretrain::PretrainConfig;
use pneunet_core::synth::{BlobConfig, ShapesConfig};
use pneunet_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub samples: usize,
    pub test_samples: usize,
    pub shapes: ShapesConfig,
    pub train: TrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            samples: d.samples,
            test_samples: d.test_samples,
            shapes: d.shapes,
            train: d.train,
        }
    }
}

/// Every section is optional in a config file; missing keys take defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainSection,
    /// Generator settings for `pneunet synth`.
    pub synth: BlobConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            model: self.model.clone(),
            shapes: self.pretrain.shapes,
            samples: self.pretrain.samples,
            test_samples: self.pretrain.test_samples,
            train: self.pretrain.train,
        }
    }

    /// Same seed for every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.pretrain.train.seed = seed;
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
