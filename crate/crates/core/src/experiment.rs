//! TOML experiment files: a `[dataset]` table, a `[trainer]` table and an
//! optional `[sweep]` table. Unknown keys are rejected everywhere.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GaussianShiftParams;
use crate::error::{Error, Result};
use crate::trainer::{Preset, TrainerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub presets: Vec<Preset>,
    /// Seeds per preset; run `i` uses `seed + i` for both data and model.
    pub repeats: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { presets: Preset::ABLATION.to_vec(), repeats: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: GaussianShiftParams,
    pub trainer: TrainerConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.trainer.validate()?;
        if self.sweep.repeats == 0 || self.sweep.presets.is_empty() {
            return Err(Error::Config("sweep needs at least one preset and one repeat".into()));
        }
        Ok(())
    }

    /// Sets both the data and the model seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.dataset.seed = seed;
        self.trainer.seed = seed;
        self
    }
}
