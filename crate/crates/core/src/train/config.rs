use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::DataConfig;
use crate::distill::DistillConfig;
use crate::encoder::ModelConfig;
use crate::error::{Error, Result};

use super::optimizer::OptimizerConfig;

/// Everything a run needs besides its corpus, as stored in TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            distill: DistillConfig::default(),
            optimizer: OptimizerConfig::default(),
            data: DataConfig::default(),
            seed: 0,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.distill.validate()?;
        self.optimizer.validate()?;
        self.data.masking.validate()?;
        if self.data.n_max > self.model.max_sequence_len() {
            return Err(Error::Config(format!(
                "data.n_max {} exceeds the longest admissible sequence {}",
                self.data.n_max,
                self.model.max_sequence_len()
            )));
        }
        Ok(())
    }
}
