//! Training configuration and reports.

use serde::{Deserialize, Serialize};

use crate::{DsrError, Result};

/// Which objective the loop minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Energy score over an m-sample prediction fan.
    Energy,
    /// Mean squared error on a single deterministic prediction.
    Mse,
}

/// Law of the noise added to inputs before the forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseSpec {
    /// Same variance on every input entry.
    Isotropic { variance: f64 },
    /// One variance per feature (per input column for row data, per
    /// channel for volumetric data).
    Diagonal { variances: Vec<f64> },
}

impl NoiseSpec {
    pub fn isotropic(variance: f64) -> Self {
        NoiseSpec::Isotropic { variance }
    }

    pub fn none() -> Self {
        NoiseSpec::Isotropic { variance: 0.0 }
    }

    /// True when every draw is exactly zero.
    pub fn is_zero(&self) -> bool {
        match self {
            NoiseSpec::Isotropic { variance } => *variance == 0.0,
            NoiseSpec::Diagonal { variances } => variances.iter().all(|v| *v == 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |v: f64| -> Result<()> {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DsrError::Config(format!(
                    "noise variance must be non-negative and finite, got {v}"
                )));
            }
            Ok(())
        };
        match self {
            NoiseSpec::Isotropic { variance } => check(*variance),
            NoiseSpec::Diagonal { variances } => {
                if variances.is_empty() {
                    return Err(DsrError::Config(
                        "diagonal noise needs at least one variance".into(),
                    ));
                }
                variances.iter().try_for_each(|v| check(*v))
            }
        }
    }

    /// Per-feature standard deviations, broadcast to `width` entries.
    /// Errors when a diagonal spec does not match the feature width.
    pub(crate) fn std_devs(&self, width: usize) -> Result<Vec<f64>> {
        match self {
            NoiseSpec::Isotropic { variance } => Ok(vec![variance.sqrt(); width]),
            NoiseSpec::Diagonal { variances } => {
                if variances.len() != width {
                    return Err(DsrError::Dimension(format!(
                        "diagonal noise has {} variances but the data has {width} features",
                        variances.len()
                    )));
                }
                Ok(variances.iter().map(|v| v.sqrt()).collect())
            }
        }
    }
}

/// Hyperparameters of one training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Observations per optimization step for volumetric training;
    /// row-data training is always full-batch.
    pub batch_size: usize,
    /// Noise replicates per observation.
    pub m: usize,
    pub noise: NoiseSpec,
    pub loss: LossKind,
    pub seed: u64,
    /// Print a progress line every this many epochs (0 = silent).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 200,
            batch_size: 4,
            m: 2,
            noise: NoiseSpec::isotropic(0.01),
            loss: LossKind::Energy,
            seed: 0,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DsrError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 {
            return Err(DsrError::Config("epoch count must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DsrError::Config("batch size must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(DsrError::Config("replicate count m must be at least 1".into()));
        }
        self.noise.validate()?;
        match self.loss {
            LossKind::Energy => {
                // with exactly-zero noise the spread term vanishes and
                // m = 1 is equivalent to the plain norm loss, so only
                // noisy training demands a real fan
                if self.m < 2 && !self.noise.is_zero() {
                    return Err(DsrError::Config(format!(
                        "energy loss with noise needs m >= 2 replicates, got m = {}",
                        self.m
                    )));
                }
            }
            LossKind::Mse => {
                if self.m != 1 {
                    return Err(DsrError::Config(format!(
                        "mse loss uses a single deterministic prediction (m = 1), got m = {}",
                        self.m
                    )));
                }
                if !self.noise.is_zero() {
                    return Err(DsrError::Config(
                        "mse loss does not inject input noise; set the variance to 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Replicates actually evaluated: zero-noise energy training still
    /// builds a 2-fan of identical predictions, which leaves both loss
    /// value and gradients exactly equal to the m = 1 case while
    /// keeping a single code path.
    pub(crate) fn effective_m(&self) -> usize {
        match self.loss {
            LossKind::Energy => self.m.max(2),
            LossKind::Mse => 1,
        }
    }
}

/// Two-phase adaptation schedule: re-initialize the final layer, train
/// it alone (linear probing), then unfreeze everything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub base: TrainConfig,
    /// Epochs with only the final layer trainable.
    pub probe_epochs: usize,
    /// Epochs with all parameters trainable.
    pub full_epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            base: TrainConfig::default(),
            probe_epochs: 300,
            full_epochs: 200,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.probe_epochs == 0 || self.full_epochs == 0 {
            return Err(DsrError::Config(
                "both fine-tuning phases need at least 1 epoch".into(),
            ));
        }
        Ok(())
    }
}

/// What a training loop did, epoch by epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each epoch, in order.
    pub train_loss: Vec<f64>,
    /// Validation loss after each epoch; empty when no validation data
    /// was supplied.
    pub val_loss: Vec<f64>,
    /// Epochs per phase; a single-phase run records one entry.
    pub phase_epochs: Vec<usize>,
    pub wall_seconds: f64,
    pub seed: u64,
    /// Filled by callers that persist the result.
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.phase_epochs.iter().sum()
    }
}
