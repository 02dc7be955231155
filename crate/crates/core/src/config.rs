//! Run configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forward::{FieldConfig, KSpaceDataset, ModelConfig};
use crate::optimize::{SchedulerConfig, WarmupConfig};
use crate::regularize::RegWeights;
use crate::sampler::{AxisBatch, BatchSpec, CoilCount};

/// Tolerance below which data-consistency residuals are weighted uniformly.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsilonRule {
    /// Fraction of the largest measured magnitude.
    Relative(f64),
    Absolute(f64),
}

impl Default for EpsilonRule {
    fn default() -> Self {
        Self::Relative(1e-3)
    }
}

impl EpsilonRule {
    pub fn resolve(&self, dataset: &KSpaceDataset) -> f64 {
        match *self {
            Self::Relative(r) => r * dataset.max_abs(),
            Self::Absolute(e) => e,
        }
    }
}

/// All hyperparameters of a reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub batch: BatchSpec,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub epsilon: EpsilonRule,
    /// Fixed weights, used when the warm-up is disabled.
    pub regularization: RegWeights,
    pub warmup: WarmupConfig,
    pub scheduler: SchedulerConfig,
    /// Evaluate regularizers with zero weight for the loss trace.
    pub monitor_all_terms: bool,
    /// Main-loop iterations between checkpoints; defaults to a twentieth of
    /// the run.
    pub checkpoint_every: Option<usize>,
}

impl Default for RunConfig {
    /// Full-size architectures with the 2-D cine batch and step settings.
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            batch: BatchSpec::default(),
            iterations: 5000,
            lr: 8e-6,
            weight_decay: 0.0,
            seed: 0,
            epsilon: EpsilonRule::default(),
            regularization: RegWeights::default(),
            warmup: WarmupConfig::default(),
            scheduler: SchedulerConfig::default(),
            monitor_all_terms: false,
            checkpoint_every: None,
        }
    }
}

impl RunConfig {
    /// Small architectures and a larger step for 64 x 64 desk-scale data.
    pub fn desk() -> Self {
        let field = |modes: Vec<usize>, omega: f64| FieldConfig {
            layers: 2,
            width: 32,
            modes,
            omega_first: omega,
            omega_hidden: omega,
        };
        Self {
            model: ModelConfig {
                magnetization: field(vec![12, 40, 40], 30.0),
                coils: field(vec![4, 4], 5.0),
            },
            batch: BatchSpec {
                coils: CoilCount::All,
                time: AxisBatch::same(8),
                space: vec![AxisBatch::same(64); 2],
            },
            iterations: 3000,
            lr: 1e-3,
            scheduler: SchedulerConfig {
                patience: 100,
                ..SchedulerConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn checkpoint_interval(&self) -> usize {
        self.checkpoint_every.unwrap_or(self.iterations / 20).max(1)
    }

    /// Checks internal consistency and agreement with the dataset geometry.
    pub fn validate_for(&self, dataset: &KSpaceDataset) -> Result<()> {
        let n = dataset.spatial_dim();
        let invalid = |m: String| Err(Error::Validation(m));
        if self.model.magnetization.modes.len() != n + 1 {
            return invalid(format!(
                "magnetization needs {} mode counts (time + {n} spatial), got {}",
                n + 1,
                self.model.magnetization.modes.len()
            ));
        }
        if self.model.coils.modes.len() != n {
            return invalid(format!(
                "coil field needs {n} mode counts, got {}",
                self.model.coils.modes.len()
            ));
        }
        self.batch.validate(n)?;
        self.regularization.validate()?;
        self.warmup.validate().map_err(Error::Validation)?;
        self.scheduler.validate().map_err(Error::Validation)?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return invalid(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        let eps = match self.epsilon {
            EpsilonRule::Relative(v) | EpsilonRule::Absolute(v) => v,
        };
        if !(eps.is_finite() && eps > 0.0) {
            return invalid(format!("epsilon must be positive, got {eps}"));
        }
        if self.checkpoint_every == Some(0) {
            return invalid("checkpoint interval must be at least 1".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "run config".into(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
