//! Desk-scale robustness and ablation protocols for the volumetric
//! pipeline: the prediction/fine-tune noise sweep, repeated random
//! fine-tune/test splits, and the pretraining-by-augmentation-depth
//! ablation grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geomdata::PatchPair;
use crate::netzoo::{ModelParams, UNet3dSpec};
use crate::predictor::{evaluate_tensors, mc_upsample, PredictSpec, SIGMA2_GRID};
use crate::trainer::{finetune_lpft, pretrain, FinetuneConfig, NoiseSpec, TrainConfig};
use crate::{mix_seed, DsrError, Real, Result};

/// Mean pooled MSE over `pairs` when every input is simply kept as
/// the prediction — the nearest-upsampled degraded field itself.
pub fn identity_mse<T: Real>(pairs: &[PatchPair<T>]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DsrError::Usage("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for pair in pairs {
        total += evaluate_tensors(&pair.input, &pair.target)?.mse_overall;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean pooled MSE of the model's Monte-Carlo predictions over
/// `pairs`.
pub fn model_test_mse<T: Real>(
    model: &ModelParams<T>,
    pairs: &[PatchPair<T>],
    samples: usize,
    sigma2: f64,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(DsrError::Usage("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for (i, pair) in pairs.iter().enumerate() {
        let spec = PredictSpec {
            samples,
            sigma2,
            seed: mix_seed(seed, i as u64),
        };
        let pred = mc_upsample(model, &pair.input, &spec)?;
        total += evaluate_tensors(&pred, &pair.target)?.mse_overall;
    }
    Ok(total / pairs.len() as f64)
}

/// Settings for [`robustness_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub finetune: FinetuneConfig,
    /// Monte-Carlo samples per prediction.
    pub predict_samples: usize,
    /// Prediction-noise variance used in the split rounds (the sweep
    /// part varies it instead).
    pub predict_sigma2: f64,
    /// Noise variances swept jointly at fine-tune and prediction time.
    pub sigma_grid: Vec<f64>,
    /// Number of random fine-tune/test re-splits.
    pub split_rounds: usize,
    pub seed: u64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            finetune: FinetuneConfig::default(),
            predict_samples: 100,
            predict_sigma2: 0.01,
            sigma_grid: SIGMA2_GRID.to_vec(),
            split_rounds: 30,
            seed: 0,
        }
    }
}

impl RobustnessConfig {
    pub fn validate(&self) -> Result<()> {
        self.finetune.validate()?;
        if self.predict_samples == 0 {
            return Err(DsrError::Config("need at least one prediction sample".into()));
        }
        if !(self.predict_sigma2.is_finite() && self.predict_sigma2 >= 0.0) {
            return Err(DsrError::Config(format!(
                "prediction noise variance must be finite and >= 0, got {}",
                self.predict_sigma2
            )));
        }
        if self.sigma_grid.is_empty()
            || self.sigma_grid.iter().any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(DsrError::Config(
                "the noise sweep needs a non-empty grid of finite variances >= 0".into(),
            ));
        }
        if self.split_rounds == 0 {
            return Err(DsrError::Config("need at least one split round".into()));
        }
        Ok(())
    }
}

/// One sweep point: fine-tuned and predicted under the same noise
/// variance. A failed entry records its error and a NaN MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaOutcome {
    pub sigma2: f64,
    pub test_mse: f64,
    pub error: Option<String>,
}

/// One random re-split: the fine-tuned model's test MSE next to the
/// keep-the-input baseline on the same test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitOutcome {
    pub round: usize,
    pub dsr_mse: f64,
    pub identity_mse: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub sigma_sweep: Vec<SigmaOutcome>,
    pub splits: Vec<SplitOutcome>,
}

/// (a) Sweeps the noise variance jointly at fine-tune and prediction
/// time over `config.sigma_grid`; (b) repeats the fine-tune/test
/// split `config.split_rounds` times at the original sizes with
/// reshuffled membership. Errors are recorded per entry, not fatal.
pub fn robustness_suite<T: Real>(
    pretrained: &ModelParams<T>,
    finetune_pairs: &[PatchPair<T>],
    test_pairs: &[PatchPair<T>],
    config: &RobustnessConfig,
) -> Result<RobustnessReport> {
    config.validate()?;
    if finetune_pairs.is_empty() || test_pairs.is_empty() {
        return Err(DsrError::Usage(
            "the robustness protocols need non-empty fine-tune and test sets".into(),
        ));
    }

    let mut sigma_sweep = Vec::with_capacity(config.sigma_grid.len());
    for (k, &sigma2) in config.sigma_grid.iter().enumerate() {
        let ft = FinetuneConfig {
            base: TrainConfig {
                noise: NoiseSpec::isotropic(sigma2),
                seed: mix_seed(config.seed, 10 + k as u64),
                ..config.finetune.base.clone()
            },
            ..config.finetune.clone()
        };
        let attempt = finetune_lpft(pretrained, finetune_pairs, &ft).and_then(|(tuned, _)| {
            model_test_mse(
                &tuned,
                test_pairs,
                config.predict_samples,
                sigma2,
                mix_seed(config.seed, 100 + k as u64),
            )
        });
        sigma_sweep.push(match attempt {
            Ok(test_mse) => SigmaOutcome {
                sigma2,
                test_mse,
                error: None,
            },
            Err(e) => SigmaOutcome {
                sigma2,
                test_mse: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }

    let pool: Vec<&PatchPair<T>> = finetune_pairs.iter().chain(test_pairs).collect();
    let ft_len = finetune_pairs.len();
    let mut splits = Vec::with_capacity(config.split_rounds);
    for round in 0..config.split_rounds {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            config.seed,
            1000 + round as u64,
        )));
        let ft_set: Vec<PatchPair<T>> = order[..ft_len].iter().map(|&i| pool[i].clone()).collect();
        let test_set: Vec<PatchPair<T>> =
            order[ft_len..].iter().map(|&i| pool[i].clone()).collect();
        let ft = FinetuneConfig {
            base: TrainConfig {
                seed: mix_seed(config.seed, 2000 + round as u64),
                ..config.finetune.base.clone()
            },
            ..config.finetune.clone()
        };
        let attempt = finetune_lpft(pretrained, &ft_set, &ft).and_then(|(tuned, _)| {
            Ok((
                model_test_mse(
                    &tuned,
                    &test_set,
                    config.predict_samples,
                    config.predict_sigma2,
                    mix_seed(config.seed, 3000 + round as u64),
                )?,
                identity_mse(&test_set)?,
            ))
        });
        splits.push(match attempt {
            Ok((dsr_mse, identity)) => SplitOutcome {
                round,
                dsr_mse,
                identity_mse: identity,
                error: None,
            },
            Err(e) => SplitOutcome {
                round,
                dsr_mse: f64::NAN,
                identity_mse: f64::NAN,
                error: Some(e.to_string()),
            },
        });
    }

    Ok(RobustnessReport {
        sigma_sweep,
        splits,
    })
}

/// Settings for [`ablation_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub arch: UNet3dSpec,
    pub pretrain: TrainConfig,
    pub finetune: FinetuneConfig,
    pub predict_samples: usize,
    pub predict_sigma2: f64,
    /// Augmentation depths compared on the pretraining pool: a depth
    /// `l` keeps the pyramid pairs with level <= l.
    pub level_options: Vec<usize>,
    pub seed: u64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            arch: UNet3dSpec::default(),
            pretrain: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            predict_samples: 100,
            predict_sigma2: 0.01,
            level_options: vec![1, 4],
            seed: 0,
        }
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.predict_samples == 0 {
            return Err(DsrError::Config("need at least one prediction sample".into()));
        }
        if self.level_options.is_empty() || self.level_options.iter().any(|&l| l == 0) {
            return Err(DsrError::Config(
                "augmentation depths must be a non-empty list of levels >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One cell of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationVariant {
    /// Whether the model was pretrained before fine-tuning.
    pub pretrained: bool,
    /// Augmentation depth of the pretraining pool (recorded for both
    /// arms; it only affects the pretrained one).
    pub levels: usize,
    pub test_mse: f64,
    pub error: Option<String>,
}

/// Trains and evaluates the 2x2 grid {pretrain on/off} x
/// {augmentation depths}: each variant starts from a fresh seeded
/// model, optionally pretrains on the pyramid pairs up to its depth,
/// then runs the same two-phase fine-tuning and test protocol.
/// Errors are recorded per variant, not fatal.
pub fn ablation_suite<T: Real>(
    pretrain_pool: &[PatchPair<T>],
    pretrain_val: &[PatchPair<T>],
    finetune_pairs: &[PatchPair<T>],
    test_pairs: &[PatchPair<T>],
    config: &AblationConfig,
) -> Result<Vec<AblationVariant>> {
    config.validate()?;
    if finetune_pairs.is_empty() || test_pairs.is_empty() {
        return Err(DsrError::Usage(
            "the ablation grid needs non-empty fine-tune and test sets".into(),
        ));
    }
    let mut variants = Vec::with_capacity(2 * config.level_options.len());
    for &with_pretrain in &[true, false] {
        for (li, &levels) in config.level_options.iter().enumerate() {
            let vi = (usize::from(!with_pretrain) * config.level_options.len() + li) as u64;
            let attempt = (|| -> Result<f64> {
                let init = ModelParams::<T>::build_unet3d(
                    config.arch.clone(),
                    mix_seed(config.seed, 100 + vi),
                )?;
                let model = if with_pretrain {
                    let pool: Vec<PatchPair<T>> = pretrain_pool
                        .iter()
                        .filter(|p| p.level <= levels)
                        .cloned()
                        .collect();
                    if pool.is_empty() {
                        return Err(DsrError::Usage(format!(
                            "no pretraining pairs at augmentation depth {levels}"
                        )));
                    }
                    let val: Vec<PatchPair<T>> = pretrain_val
                        .iter()
                        .filter(|p| p.level <= levels)
                        .cloned()
                        .collect();
                    let cfg = TrainConfig {
                        seed: mix_seed(config.seed, 200 + vi),
                        ..config.pretrain.clone()
                    };
                    pretrain(init, &pool, &val, &cfg)?.0
                } else {
                    init
                };
                let ft = FinetuneConfig {
                    base: TrainConfig {
                        seed: mix_seed(config.seed, 300 + vi),
                        ..config.finetune.base.clone()
                    },
                    ..config.finetune.clone()
                };
                let (tuned, _) = finetune_lpft(&model, finetune_pairs, &ft)?;
                model_test_mse(
                    &tuned,
                    test_pairs,
                    config.predict_samples,
                    config.predict_sigma2,
                    mix_seed(config.seed, 400 + vi),
                )
            })();
            variants.push(match attempt {
                Ok(test_mse) => AblationVariant {
                    pretrained: with_pretrain,
                    levels,
                    test_mse,
                    error: None,
                },
                Err(e) => AblationVariant {
                    pretrained: with_pretrain,
                    levels,
                    test_mse: f64::NAN,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    Ok(variants)
}
