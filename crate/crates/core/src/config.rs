//! Pipeline run configuration: one TOML document covering synthesis,
//! ingestion, clustering, model architecture, training, and evaluation.
//!
//! Every section is optional and individually defaultable, so an empty file
//! (or no file) yields the default desk-scale run. One `seed` drives every
//! stage; per-POI and per-cluster streams are derived from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::IngestConfig;
use crate::error::{Error, Result};
use crate::evaluate::EvalOptions;
use crate::nbeats::{NBeatsConfig, TrainParams};
use crate::synth::{self, SynthConfig};

/// Per-POI clustering controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    /// Requested clusters per POI (capped at the POI's cell count).
    pub k: usize,
    /// Keep clusters at least this fraction of the POI's largest cluster.
    pub retention_ratio: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        ClusterParams {
            k: 50,
            retention_ratio: crate::clustering::DEFAULT_RETENTION_RATIO,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

/// Forecaster architecture, minus the window geometry which is owned by the
/// dataset section.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub n_stacks: usize,
    pub blocks_per_stack: usize,
    pub fc_layers_per_block: usize,
    pub fc_width: usize,
    pub theta_dim: usize,
    pub cross_channel_input: bool,
}

/// Sized for hundreds of per-cluster models on one core; widen for accuracy
/// studies.
impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            n_stacks: 1,
            blocks_per_stack: 3,
            fc_layers_per_block: 2,
            fc_width: 24,
            theta_dim: 8,
            cross_channel_input: true,
        }
    }
}

impl ModelParams {
    /// Bind the architecture to the dataset's window geometry.
    pub fn to_nbeats(&self, lookback: usize, horizon: usize) -> NBeatsConfig {
        NBeatsConfig {
            lookback,
            horizon,
            n_stacks: self.n_stacks,
            blocks_per_stack: self.blocks_per_stack,
            fc_layers_per_block: self.fc_layers_per_block,
            fc_width: self.fc_width,
            theta_dim: self.theta_dim,
            n_branches: 2,
            cross_channel_input: self.cross_channel_input,
        }
    }
}

/// Complete configuration for a pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: IngestConfig,
    pub clustering: ClusterParams,
    pub model: ModelParams,
    pub training: TrainParams,
    pub evaluation: EvalOptions,
    /// Corpus recipe; omitted means the built-in default corpus under `seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            // The default corpus carries few enough labels that all of them
            // are worth separate buckets.
            dataset: IngestConfig {
                coverage: 1.0,
                ..IngestConfig::default()
            },
            clustering: ClusterParams::default(),
            model: ModelParams::default(),
            training: TrainParams::default(),
            evaluation: EvalOptions::default(),
            synth: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.nbeats_config().validate()?;

        let c = &self.clustering;
        if c.k == 0 {
            return Err(Error::Config("clustering.k must be at least 1".into()));
        }
        if !(c.retention_ratio > 0.0 && c.retention_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "clustering.retention_ratio must be in (0, 1], got {}",
                c.retention_ratio
            )));
        }
        if c.max_iter == 0 {
            return Err(Error::Config(
                "clustering.max_iter must be at least 1".into(),
            ));
        }
        if !(c.tol >= 0.0 && c.tol.is_finite()) {
            return Err(Error::Config(format!(
                "clustering.tol must be finite and non-negative, got {}",
                c.tol
            )));
        }

        let t = &self.training;
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "training.learning_rate must be positive, got {}",
                t.learning_rate
            )));
        }
        if t.batch_size == 0 || t.max_epochs == 0 || t.patience == 0 {
            return Err(Error::Config(
                "training batch_size, max_epochs, and patience must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&t.validation_fraction) {
            return Err(Error::Config(format!(
                "training.validation_fraction must be in [0, 1), got {}",
                t.validation_fraction
            )));
        }

        if let Some(synth) = &self.synth {
            synth.validate()?;
            if synth.n_weeks != self.dataset.n_weeks {
                return Err(Error::Config(format!(
                    "synth.n_weeks ({}) disagrees with dataset.n_weeks ({})",
                    synth.n_weeks, self.dataset.n_weeks
                )));
            }
        }
        Ok(())
    }

    /// The bound forecaster architecture.
    pub fn nbeats_config(&self) -> NBeatsConfig {
        self.model
            .to_nbeats(self.dataset.lookback, self.dataset.horizon)
    }

    /// The corpus recipe this run generates when asked to synthesize. The
    /// built-in default follows the dataset's week count and the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        self.synth.clone().unwrap_or_else(|| SynthConfig {
            n_weeks: self.dataset.n_weeks,
            ..synth::default_config(self.seed)
        })
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
