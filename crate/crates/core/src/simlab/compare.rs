//! Head-to-head study: the distributional estimator vs the L2
//! baseline against a Monte-Carlo oracle on an extrapolation grid.

use serde::{Deserialize, Serialize};

use super::gen::{eval_grid, gen_dataset, make_ground_truth, oracle_mean, GroundTruth, SimConfig};
use crate::diffcore::{Activation, Tensor};
use crate::netzoo::{MlpSpec, ModelParams};
use crate::trainer::{train_l2_baseline, train_mlp, LossKind, NoiseSpec, TrainConfig};
use crate::{mix_seed, DsrError, Real, Result};

// Sub-seed streams: the oracle and each run draw from disjoint
// children of the study seed.
const STREAM_ORACLE: u64 = 1;
const STREAM_RUNS: u64 = 0x100;

/// Across-run summary of one estimator on the evaluation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorBand {
    pub mean: Vec<f64>,
    pub q10: Vec<f64>,
    pub q90: Vec<f64>,
}

/// One run's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run: usize,
    pub seed: u64,
    /// Projection coefficients recovered from the trained
    /// distributional model, normalized to a unit first coefficient;
    /// absent when extraction is undefined (near-zero anchor).
    pub beta_hat: Option<Vec<f64>>,
    /// Largest training-set projection: grid points at or below it
    /// count as in-domain.
    pub threshold: f64,
    pub dsr_mse_in: f64,
    pub dsr_mse_out: f64,
    pub l2_mse_in: f64,
    pub l2_mse_out: f64,
    /// A failed run records its error here and is excluded from the
    /// aggregates; the study itself keeps going.
    pub error: Option<String>,
}

/// Medians of the per-run MSEs over successful runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MedianMse {
    pub dsr_in: f64,
    pub dsr_out: f64,
    pub l2_in: f64,
    pub l2_out: f64,
}

/// Full study output: the grid, the oracle, across-run bands for both
/// estimators, and every run's numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: SimConfig,
    /// Common coordinate value of each evaluation point.
    pub grid: Vec<f64>,
    pub oracle: Vec<f64>,
    pub dsr: EstimatorBand,
    pub l2: EstimatorBand,
    pub outcomes: Vec<RunOutcome>,
}

impl RunReport {
    /// Median per-run MSEs over runs that finished without error.
    pub fn median_mse(&self) -> MedianMse {
        let pick = |f: fn(&RunOutcome) -> f64| -> f64 {
            let vals: Vec<f64> = self
                .outcomes
                .iter()
                .filter(|o| o.error.is_none())
                .map(f)
                .filter(|v| v.is_finite())
                .collect();
            median(vals)
        };
        MedianMse {
            dsr_in: pick(|o| o.dsr_mse_in),
            dsr_out: pick(|o| o.dsr_mse_out),
            l2_in: pick(|o| o.l2_mse_in),
            l2_out: pick(|o| o.l2_mse_out),
        }
    }

    /// Fraction of grid points whose across-run mean lies inside the
    /// [q10, q90] band, for both estimators pooled (a sanity check on
    /// the band computation).
    pub fn band_contains_mean_fraction(&self) -> f64 {
        let count = |band: &EstimatorBand| -> usize {
            band.mean
                .iter()
                .zip(band.q10.iter().zip(&band.q90))
                .filter(|&(m, (lo, hi))| *lo <= *m && *m <= *hi)
                .count()
        };
        let total = self.dsr.mean.len() + self.l2.mean.len();
        if total == 0 {
            return 0.0;
        }
        (count(&self.dsr) + count(&self.l2)) as f64 / total as f64
    }
}

fn median(mut vals: Vec<f64>) -> f64 {
    if vals.is_empty() {
        return f64::NAN;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn band(rows: &[Vec<f64>], grid_len: usize) -> EstimatorBand {
    let mut mean = vec![f64::NAN; grid_len];
    let mut q10 = vec![f64::NAN; grid_len];
    let mut q90 = vec![f64::NAN; grid_len];
    if !rows.is_empty() {
        for i in 0..grid_len {
            let mut vals: Vec<f64> = rows.iter().map(|r| r[i]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            mean[i] = vals.iter().sum::<f64>() / vals.len() as f64;
            q10[i] = quantile_sorted(&vals, 0.1);
            q90[i] = quantile_sorted(&vals, 0.9);
        }
    }
    EstimatorBand { mean, q10, q90 }
}

/// Monte-Carlo prediction of the distributional model on the grid:
/// per grid point, the average of `draws` forward passes on
/// noise-perturbed inputs. One noise vector is shared by all grid
/// points within a draw (each point still averages over `draws`
/// independent perturbations), and draws are blocked into batched
/// forward passes. Accumulation runs in f64.
pub fn dsr_predict<T: Real>(
    model: &ModelParams<T>,
    truth: &GroundTruth,
    grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if draws == 0 || grid.is_empty() {
        return Err(DsrError::Config(
            "prediction needs at least one draw and one grid point".into(),
        ));
    }
    let n = grid.len();
    let dim = truth.dim();
    let noise_std: Vec<f64> = truth.noise_variance.iter().map(|v| v.sqrt()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    use rand::SeedableRng;
    let mut acc = vec![0.0f64; n];
    const BLOCK: usize = 8;
    let mut done = 0;
    while done < draws {
        let b = BLOCK.min(draws - done);
        let mut data = Vec::with_capacity(b * n * dim);
        for _ in 0..b {
            let eps: Vec<f64> = noise_std
                .iter()
                .map(|&s| s * <f64 as Real>::standard_normal(&mut rng))
                .collect();
            for &v in grid {
                for &e in &eps {
                    data.push(T::from_f64(v + e));
                }
            }
        }
        let out = model.forward_value(&Tensor::new(vec![b * n, dim], data)?)?;
        if !out.all_finite() {
            return Err(DsrError::Numeric(format!(
                "non-finite prediction in draw block starting at draw {done}"
            )));
        }
        for (k, &o) in out.data().iter().enumerate() {
            acc[k % n] += o.to_f64();
        }
        done += b;
    }
    Ok(acc.into_iter().map(|a| a / draws as f64).collect())
}

/// The baseline's prediction: one deterministic forward pass on the
/// clean grid inputs.
pub fn l2_predict<T: Real>(model: &ModelParams<T>, dim: usize, grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(DsrError::Config("prediction needs grid points".into()));
    }
    let mut data = Vec::with_capacity(grid.len() * dim);
    for &v in grid {
        data.extend(std::iter::repeat(T::from_f64(v)).take(dim));
    }
    let out = model.forward_value(&Tensor::new(vec![grid.len(), dim], data)?)?;
    if !out.all_finite() {
        return Err(DsrError::Numeric("non-finite baseline prediction".into()));
    }
    Ok(out.data().iter().map(|o| (*o).to_f64()).collect())
}

fn split_mse(pred: &[f64], oracle: &[f64], in_domain: &[bool]) -> (f64, f64) {
    let mut acc = [0.0f64; 2];
    let mut cnt = [0usize; 2];
    for ((p, o), &inside) in pred.iter().zip(oracle).zip(in_domain) {
        let k = usize::from(!inside);
        acc[k] += (p - o) * (p - o);
        cnt[k] += 1;
    }
    let at = |k: usize| if cnt[k] == 0 { f64::NAN } else { acc[k] / cnt[k] as f64 };
    (at(0), at(1))
}

struct RunResult {
    outcome: RunOutcome,
    dsr_pred: Vec<f64>,
    l2_pred: Vec<f64>,
}

fn run_once(
    config: &SimConfig,
    grid: &[f64],
    oracle: &[f64],
    run: usize,
    run_seed: u64,
) -> Result<RunResult> {
    let dataset = gen_dataset(config, mix_seed(run_seed, 1))?;
    // trained at f32 for speed; every aggregate accumulates in f64
    let x = dataset.x.convert::<f32>();
    let y = dataset.y.convert::<f32>();
    let arch = MlpSpec {
        input_dim: config.dim,
        hidden: config.hidden.clone(),
        activation: Activation::Relu,
    };
    let dsr_init = ModelParams::<f32>::build_mlp(arch.clone(), mix_seed(run_seed, 2))?;
    let dsr_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        m: config.fan,
        noise: NoiseSpec::Diagonal {
            variances: dataset.truth.noise_variance.clone(),
        },
        loss: LossKind::Energy,
        seed: mix_seed(run_seed, 3),
        ..TrainConfig::default()
    };
    let (dsr_model, _) = train_mlp(dsr_init, &x, &y, &dsr_cfg)?;

    let l2_init = ModelParams::<f32>::build_mlp(arch, mix_seed(run_seed, 4))?;
    let l2_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        epochs: config.epochs,
        seed: mix_seed(run_seed, 5),
        ..TrainConfig::default()
    };
    let (l2_model, _) = train_l2_baseline(l2_init, &x, &y, &l2_cfg)?;

    let dsr_pred = dsr_predict(
        &dsr_model,
        &dataset.truth,
        grid,
        config.oracle_draws,
        mix_seed(run_seed, 6),
    )?;
    let l2_pred = l2_predict(&l2_model, config.dim, grid)?;

    let sb = dataset.truth.beta_sum();
    let in_domain: Vec<bool> = grid
        .iter()
        .map(|&v| v * sb <= dataset.max_projection)
        .collect();
    let (dsr_mse_in, dsr_mse_out) = split_mse(&dsr_pred, oracle, &in_domain);
    let (l2_mse_in, l2_mse_out) = split_mse(&l2_pred, oracle, &in_domain);
    Ok(RunResult {
        outcome: RunOutcome {
            run,
            seed: run_seed,
            beta_hat: dsr_model.extract_beta().ok(),
            threshold: dataset.max_projection,
            dsr_mse_in,
            dsr_mse_out,
            l2_mse_in,
            l2_mse_out,
            error: None,
        },
        dsr_pred,
        l2_pred,
    })
}

/// Runs the full study: `config.runs` independent train/predict
/// cycles for both estimators, aggregated into across-run bands and
/// per-run MSEs against a common Monte-Carlo oracle. A failed run is
/// recorded on its outcome and skipped in the aggregates. Fully
/// deterministic given `config.seed`.
///
/// The oracle is computed once: its input only enters through the
/// projection `beta' (x + eps)`, whose law is identical for every
/// run's coefficient draw (the same values on a permuted support), so
/// one oracle serves all runs.
pub fn run_comparison(config: &SimConfig) -> Result<RunReport> {
    config.validate()?;
    let grid = eval_grid(config);
    let oracle_truth = make_ground_truth(config, mix_seed(config.seed, STREAM_ORACLE))?;
    let oracle = oracle_mean(
        &oracle_truth,
        &grid,
        config.oracle_draws,
        mix_seed(config.seed, STREAM_ORACLE + 1),
    )?;
    let mut outcomes = Vec::with_capacity(config.runs);
    let mut dsr_rows = Vec::new();
    let mut l2_rows = Vec::new();
    for run in 0..config.runs {
        let run_seed = mix_seed(config.seed, STREAM_RUNS + run as u64);
        match run_once(config, &grid, &oracle, run, run_seed) {
            Ok(r) => {
                outcomes.push(r.outcome);
                dsr_rows.push(r.dsr_pred);
                l2_rows.push(r.l2_pred);
            }
            Err(e) => outcomes.push(RunOutcome {
                run,
                seed: run_seed,
                beta_hat: None,
                threshold: f64::NAN,
                dsr_mse_in: f64::NAN,
                dsr_mse_out: f64::NAN,
                l2_mse_in: f64::NAN,
                l2_mse_out: f64::NAN,
                error: Some(e.to_string()),
            }),
        }
    }
    let dsr = band(&dsr_rows, grid.len());
    let l2 = band(&l2_rows, grid.len());
    Ok(RunReport {
        config: config.clone(),
        grid,
        oracle,
        dsr,
        l2,
        outcomes,
    })
}
