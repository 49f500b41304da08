//! Top-level TOML configuration shared by the CLI subcommands.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::bench::{BenchConfig, StatsConfig, SweepConfig};
use crate::engine::GenerationConfig;
use crate::error::{Error, Result};
use crate::monitor::MonitorConfig;
use crate::trainer::{SyntheticTaskSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Checkpoint read by `generate` and `calibrate`, written by `train`.
    pub checkpoint: Option<PathBuf>,
    pub backbone: BackboneConfig,
    pub monitor: MonitorConfig,
    pub generation: GenerationConfig,
    pub train: TrainConfig,
    pub task: SyntheticTaskSpec,
    pub n_train: Option<usize>,
    pub n_heldout: Option<usize>,
    pub bench: BenchConfig,
    pub stats: StatsConfig,
    pub sweep: SweepConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Toml(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.monitor.validate()?;
        self.generation.validate()?;
        self.train.validate()?;
        self.task.validate(self.backbone.vocab_size)?;
        self.bench.validate()
    }

    /// Replaces every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.task.seed = seed;
        self.bench.seed = seed;
        self.sweep.seed = seed;
        self
    }
}
