//! Run configuration: one flat, human-readable TOML file holding the
//! dataset location, the output directory, and every training knob.
//! Command-line flags override file values field by field, and the fully
//! resolved result is echoed into each output directory so every artifact
//! records exactly what produced it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

pub const RESOLVED_FILE: &str = "resolved_config.toml";

/// Everything a run needs. Field names match the TOML keys; unknown keys
/// in a config file are rejected so typos fail loudly instead of running
/// with defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (manifest, images, labels).
    pub data: PathBuf,
    /// Output directory for run artifacts.
    pub out: PathBuf,
    pub lambda_adv: f64,
    pub beta: f64,
    pub k: usize,
    pub tau: f64,
    pub memory_size: usize,
    pub similarity_dim: usize,
    pub hidden_channels: Vec<usize>,
    pub feature_dim: usize,
    pub cls: usize,
    pub leaky_slope: f64,
    pub disc_hidden: Vec<usize>,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub iters_pretrain: usize,
    pub iters_per_stage: usize,
    pub batch: usize,
    pub seed: u64,
    pub no_hopfield: bool,
    pub no_curriculum: bool,
    pub no_freeze: bool,
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stop_after: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            data: PathBuf::from("data"),
            out: PathBuf::from("out"),
            lambda_adv: t.lambda_adv,
            beta: t.beta,
            k: t.k,
            tau: t.tau,
            memory_size: t.memory_size,
            similarity_dim: t.similarity_dim,
            hidden_channels: t.hidden_channels,
            feature_dim: t.feature_dim,
            cls: t.cls,
            leaky_slope: t.leaky_slope,
            disc_hidden: t.disc_hidden,
            lr_seg: t.lr_seg,
            lr_disc: t.lr_disc,
            momentum: t.momentum,
            poly_power: t.poly_power,
            iters_pretrain: t.iters_pretrain,
            iters_per_stage: t.iters_per_stage,
            batch: t.batch,
            seed: t.seed,
            no_hopfield: t.no_hopfield,
            no_curriculum: t.no_curriculum,
            no_freeze: t.no_freeze,
            checkpoint_every: t.checkpoint_every,
            stop_after: t.stop_after,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.train().validate()?;
        Ok(cfg)
    }

    /// The training-protocol slice of the run configuration.
    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lambda_adv: self.lambda_adv,
            beta: self.beta,
            k: self.k,
            tau: self.tau,
            memory_size: self.memory_size,
            similarity_dim: self.similarity_dim,
            hidden_channels: self.hidden_channels.clone(),
            feature_dim: self.feature_dim,
            cls: self.cls,
            leaky_slope: self.leaky_slope,
            disc_hidden: self.disc_hidden.clone(),
            lr_seg: self.lr_seg,
            lr_disc: self.lr_disc,
            momentum: self.momentum,
            poly_power: self.poly_power,
            iters_pretrain: self.iters_pretrain,
            iters_per_stage: self.iters_per_stage,
            batch: self.batch,
            seed: self.seed,
            no_hopfield: self.no_hopfield,
            no_curriculum: self.no_curriculum,
            no_freeze: self.no_freeze,
            checkpoint_every: self.checkpoint_every,
            stop_after: self.stop_after,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(format!("encoding config: {e}")))
    }

    /// Write the resolved configuration into `dir` so the artifacts there
    /// are self-describing. Idempotent for identical content.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        artifact::atomic_write(&dir.join(RESOLVED_FILE), self.to_toml()?.as_bytes())
    }
}
