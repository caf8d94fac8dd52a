//! Ground truth, mapping functions, seeded data generation, the
//! evaluation grid, and the Monte-Carlo oracle.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::{mix_seed, DsrError, Real, Result};

/// The four 1-D mapping functions the studies cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GName {
    Softplus,
    Square,
    Log,
    Cubic,
}

impl GName {
    pub const ALL: [GName; 4] = [GName::Softplus, GName::Square, GName::Log, GName::Cubic];

    pub fn as_str(self) -> &'static str {
        match self {
            GName::Softplus => "softplus",
            GName::Square => "square",
            GName::Log => "log",
            GName::Cubic => "cubic",
        }
    }
}

impl fmt::Display for GName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GName {
    type Err = DsrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softplus" => Ok(GName::Softplus),
            "square" => Ok(GName::Square),
            "log" => Ok(GName::Log),
            "cubic" => Ok(GName::Cubic),
            other => Err(DsrError::Config(format!(
                "unknown mapping function `{other}`; expected softplus, square, log, or cubic"
            ))),
        }
    }
}

/// Evaluates the named mapping at `x`. `c1` scales `square`, `c2`
/// scales `cubic`; both must be positive when their function is used.
/// The `log` branch is a linear continuation below 2 glued to
/// `ln(1 + x)` above, continuous at the joint.
pub fn g_eval(g: GName, x: f64, c1: f64, c2: f64) -> Result<f64> {
    match g {
        GName::Softplus => Ok(x.max(0.0) + (-x.abs()).exp().ln_1p()),
        GName::Square => {
            if !(c1.is_finite() && c1 > 0.0) {
                return Err(DsrError::Config(format!(
                    "square mapping needs a positive scale, got c1 = {c1}"
                )));
            }
            Ok(x.max(0.0).powi(2) / c1)
        }
        GName::Log => Ok(if x <= 2.0 {
            x / 3.0 + 3.0_f64.ln() - 2.0 / 3.0
        } else {
            x.ln_1p()
        }),
        GName::Cubic => {
            if !(c2.is_finite() && c2 > 0.0) {
                return Err(DsrError::Config(format!(
                    "cubic mapping needs a positive scale, got c2 = {c2}"
                )));
            }
            Ok(x.powi(3) / c2)
        }
    }
}

/// Settings for one simulation study. Training knobs (`hidden`,
/// `learning_rate`, `epochs`, `fan`) are documented defaults of this
/// implementation, tuned so a study converges in minutes on one core.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Input dimension: 3 (dense coefficients) or 64 (sparse, seeded
    /// support).
    pub dim: usize,
    pub g_name: GName,
    /// Training sample count; the evaluation grid reuses this count.
    pub n: usize,
    pub x_lower: f64,
    pub x_upper: f64,
    /// Upper end of the evaluation grid, past the training domain.
    pub eval_upper: f64,
    pub runs: usize,
    /// Monte-Carlo draws for both the oracle and the distributional
    /// estimator's prediction average.
    pub oracle_draws: usize,
    /// Nonzero coefficients of the ground truth. `dim = 3` uses them
    /// as the full vector; `dim = 64` scatters them on a seeded
    /// support.
    pub beta_values: Vec<f64>,
    /// Scale of the `square` mapping; `None` picks the per-dimension
    /// default (7.4 low-dim, 20 high-dim).
    pub c1: Option<f64>,
    /// Scale of the `cubic` mapping; `None` picks the per-dimension
    /// default (11.1 low-dim, 30 high-dim).
    pub c2: Option<f64>,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Replicates per observation in the energy-loss fan.
    pub fan: usize,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dim: 3,
            g_name: GName::Softplus,
            n: 1000,
            x_lower: 0.0,
            x_upper: 1.08,
            eval_upper: 1.64,
            runs: 20,
            oracle_draws: 10_000,
            beta_values: vec![1.0, 1.2, 1.5],
            c1: None,
            c2: None,
            hidden: vec![64, 64],
            learning_rate: 3e-3,
            epochs: 2000,
            fan: 2,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn resolved_c1(&self) -> f64 {
        self.c1.unwrap_or(if self.dim >= 64 { 20.0 } else { 7.4 })
    }

    pub fn resolved_c2(&self) -> f64 {
        self.c2.unwrap_or(if self.dim >= 64 { 30.0 } else { 11.1 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 3 && self.dim != 64 {
            return Err(DsrError::Config(format!(
                "input dimension must be 3 or 64, got {}",
                self.dim
            )));
        }
        if self.n < 2 {
            return Err(DsrError::Config("need at least 2 samples".into()));
        }
        if self.runs == 0 {
            return Err(DsrError::Config("need at least 1 run".into()));
        }
        if self.oracle_draws == 0 {
            return Err(DsrError::Config("need at least 1 oracle draw".into()));
        }
        let bounds_ok = self.x_lower.is_finite()
            && self.x_upper.is_finite()
            && self.eval_upper.is_finite()
            && self.x_lower < self.x_upper
            && self.x_upper < self.eval_upper;
        if !bounds_ok {
            return Err(DsrError::Config(format!(
                "bounds must satisfy lower < upper < eval upper, got {} / {} / {}",
                self.x_lower, self.x_upper, self.eval_upper
            )));
        }
        if self.beta_values.is_empty() || self.beta_values.iter().any(|b| !b.is_finite()) {
            return Err(DsrError::Config(
                "coefficient values must be non-empty and finite".into(),
            ));
        }
        if self.dim == 3 && self.beta_values.len() != 3 {
            return Err(DsrError::Config(format!(
                "dimension 3 needs exactly 3 coefficient values, got {}",
                self.beta_values.len()
            )));
        }
        if self.dim == 64 && self.beta_values.len() >= self.dim {
            return Err(DsrError::Config(
                "high-dimensional coefficients must be sparse (fewer values than dimensions)"
                    .into(),
            ));
        }
        if self.beta_values.iter().map(|b| b * b).sum::<f64>() == 0.0 {
            return Err(DsrError::Config("coefficients cannot all be zero".into()));
        }
        for (name, v) in [("c1", self.resolved_c1()), ("c2", self.resolved_c2())] {
            if !(v.is_finite() && v > 0.0) {
                return Err(DsrError::Config(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(DsrError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.epochs == 0 || self.fan == 0 {
            return Err(DsrError::Config(
                "epochs and fan size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The data-generating parameters of one study (for `dim = 64`, of
/// one run): coefficients, the diagonal input-noise law, and the
/// mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    /// Per-coordinate variance of the Gaussian input noise.
    pub noise_variance: Vec<f64>,
    pub g: GName,
    pub c1: f64,
    pub c2: f64,
}

impl GroundTruth {
    pub fn dim(&self) -> usize {
        self.beta.len()
    }

    /// `beta' x`.
    pub fn projection(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }

    /// Projection of the all-equal vector with unit coordinate: the
    /// evaluation grid's coordinate value maps to the index
    /// `value * beta_sum()`.
    pub fn beta_sum(&self) -> f64 {
        self.beta.iter().sum()
    }

    /// The mapping as an infallible closure; fails only when the
    /// scale constants are invalid for the chosen mapping.
    pub fn response_fn(&self) -> Result<impl Fn(f64) -> f64 + Copy + '_> {
        let (g, c1, c2) = (self.g, self.c1, self.c2);
        g_eval(g, 0.0, c1, c2)?;
        Ok(move |x: f64| g_eval(g, x, c1, c2).expect("scales validated above"))
    }
}

/// One run's training data.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    /// `[n, dim]` inputs.
    pub x: Tensor<f64>,
    /// `n` responses.
    pub y: Tensor<f64>,
    pub truth: GroundTruth,
    /// Largest `beta' x` over the training inputs — the boundary
    /// between interpolation and extrapolation on the index scale.
    pub max_projection: f64,
}

/// Builds the data-generating parameters for `config`. The seed only
/// matters for `dim = 64`, where it places the sparse coefficient
/// support; the dense low-dimensional truth is deterministic.
pub fn make_ground_truth(config: &SimConfig, seed: u64) -> Result<GroundTruth> {
    config.validate()?;
    let norm2: f64 = config.beta_values.iter().map(|b| b * b).sum();
    let (beta, noise_variance) = if config.dim == 3 {
        // noise variance is the reciprocal of the analytic variance of
        // beta' x under the componentwise-uniform input law
        let width = config.x_upper - config.x_lower;
        let var_projection = norm2 * width * width / 12.0;
        (
            config.beta_values.clone(),
            vec![1.0 / var_projection; config.dim],
        )
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let support = rand::seq::index::sample(&mut rng, config.dim, config.beta_values.len());
        let mut beta = vec![0.0; config.dim];
        for (k, pos) in support.iter().enumerate() {
            beta[pos] = config.beta_values[k];
        }
        // unit-normalized noise on the support, standard normal off it
        let var = beta
            .iter()
            .map(|&b| if b != 0.0 { 1.0 / norm2 } else { 1.0 })
            .collect();
        (beta, var)
    };
    Ok(GroundTruth {
        beta,
        noise_variance,
        g: config.g_name,
        c1: config.resolved_c1(),
        c2: config.resolved_c2(),
    })
}

/// Draws `config.n` observations from `truth`: componentwise-uniform
/// inputs on `[x_lower, x_upper]`, then `y = g(beta' (x + eps))` with
/// fresh diagonal Gaussian noise per observation.
pub fn sample_dataset(config: &SimConfig, truth: &GroundTruth, seed: u64) -> Result<SimDataset> {
    config.validate()?;
    if truth.dim() != config.dim || truth.noise_variance.len() != config.dim {
        return Err(DsrError::Dimension(format!(
            "ground truth dimension {} does not match config dimension {}",
            truth.dim(),
            config.dim
        )));
    }
    let g = truth.response_fn()?;
    let (n, dim) = (config.n, config.dim);
    let width = config.x_upper - config.x_lower;
    let noise_std: Vec<f64> = truth.noise_variance.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut xdata = Vec::with_capacity(n * dim);
    for _ in 0..n * dim {
        xdata.push(config.x_lower + width * rng.gen::<f64>());
    }
    let mut ydata = Vec::with_capacity(n);
    let mut max_projection = f64::NEG_INFINITY;
    for i in 0..n {
        let row = &xdata[i * dim..(i + 1) * dim];
        let projection = truth.projection(row);
        max_projection = max_projection.max(projection);
        let mut index = projection;
        for j in 0..dim {
            let z: f64 = Real::standard_normal(&mut rng);
            index += truth.beta[j] * noise_std[j] * z;
        }
        ydata.push(g(index));
    }
    Ok(SimDataset {
        x: Tensor::new(vec![n, dim], xdata)?,
        y: Tensor::new(vec![n], ydata)?,
        truth: truth.clone(),
        max_projection,
    })
}

/// Dense 3-dimensional generation: fixed coefficients, analytic noise
/// scale.
pub fn gen_lowdim(config: &SimConfig, seed: u64) -> Result<SimDataset> {
    if config.dim != 3 {
        return Err(DsrError::Config(format!(
            "low-dimensional generation needs dim = 3, got {}",
            config.dim
        )));
    }
    gen_dataset(config, seed)
}

/// Sparse 64-dimensional generation: seeded coefficient support,
/// block-diagonal noise scales.
pub fn gen_highdim(config: &SimConfig, seed: u64) -> Result<SimDataset> {
    if config.dim != 64 {
        return Err(DsrError::Config(format!(
            "high-dimensional generation needs dim = 64, got {}",
            config.dim
        )));
    }
    gen_dataset(config, seed)
}

/// Dispatches on `config.dim`; truth and samples draw from separate
/// sub-seeds of `seed`.
pub fn gen_dataset(config: &SimConfig, seed: u64) -> Result<SimDataset> {
    let truth = make_ground_truth(config, mix_seed(seed, 1))?;
    sample_dataset(config, &truth, mix_seed(seed, 2))
}

/// The evaluation grid on the coordinate scale: `n` equally spaced
/// values from 0 to `eval_upper` inclusive. Each grid value stands
/// for the input vector with every coordinate equal to it.
pub fn eval_grid(config: &SimConfig) -> Vec<f64> {
    let n = config.n;
    (0..n)
        .map(|i| config.eval_upper * (i as f64 / (n - 1) as f64))
        .collect()
}

/// Monte-Carlo oracle with an explicit response function (the
/// `g` argument exists so tests can substitute analytically tractable
/// responses). Per draw, one full-dimensional noise vector is drawn
/// and shared across all grid points; every grid point's average is
/// still over `draws` independent perturbations.
pub fn oracle_mean_with<F: Fn(f64) -> f64>(
    truth: &GroundTruth,
    grid: &[f64],
    draws: usize,
    seed: u64,
    g: F,
) -> Result<Vec<f64>> {
    if draws == 0 {
        return Err(DsrError::Config("oracle needs at least one draw".into()));
    }
    let noise_std: Vec<f64> = truth.noise_variance.iter().map(|v| v.sqrt()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projections = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut p = 0.0;
        for j in 0..truth.dim() {
            let z: f64 = Real::standard_normal(&mut rng);
            p += truth.beta[j] * noise_std[j] * z;
        }
        projections.push(p);
    }
    let sb = truth.beta_sum();
    Ok(grid
        .iter()
        .map(|&v| {
            let t = v * sb;
            projections.iter().map(|&p| g(t + p)).sum::<f64>() / draws as f64
        })
        .collect())
}

/// Expected response at each grid point under the true generative
/// law, estimated by `draws` Monte-Carlo samples.
pub fn oracle_mean(truth: &GroundTruth, grid: &[f64], draws: usize, seed: u64) -> Result<Vec<f64>> {
    let g = truth.response_fn()?;
    oracle_mean_with(truth, grid, draws, seed, g)
}
