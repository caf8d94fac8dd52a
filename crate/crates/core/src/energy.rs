//! Energy-score losses, the pointwise MSE baseline, and a Cramer-distance
//! oracle.
//!
//! For targets `Y_1..Y_n` and `m` replicate predictions `g_i1..g_im` per
//! observation, the energy score used throughout this crate is
//!
//! ```text
//! loss = data - spread
//! data   = 1/(n m)          * sum_i sum_j  ||Y_i - g_ij||
//! spread = 1/(2 n m (m-1))  * sum_i sum_j sum_j' ||g_ij - g_ij'||
//! ```
//!
//! with `|.|` for scalar observations and the Euclidean norm over the whole
//! per-observation tensor for vector observations. The spread term makes the
//! score strictly proper: predicting the conditional *distribution* (not its
//! mean) is the unique minimizer. All reductions run in index order and
//! accumulate in f64 regardless of the tensor dtype, so reported losses are
//! deterministic and dtype-stable; gradients stay in the tensor dtype.

use crate::diffcore::Tensor;
use crate::{DsrError, Real, Result};

/// Loss split into its two terms; `total == data_term - spread_term` exactly
/// as computed (same subtraction, no re-rounding).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub data_term: f64,
    pub spread_term: f64,
}

impl LossValue {
    fn from_terms(data_term: f64, spread_term: f64) -> Self {
        LossValue {
            total: data_term - spread_term,
            data_term,
            spread_term,
        }
    }
}

/// A batch of observations with `m` replicate predictions each:
/// `samples[i][j]` is replicate `j` for target `targets[i]`, with matching
/// shapes per observation.
#[derive(Debug, Clone)]
pub struct PredictionFan<T: Real> {
    targets: Vec<Tensor<T>>,
    samples: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> PredictionFan<T> {
    pub fn new(targets: Vec<Tensor<T>>, samples: Vec<Vec<Tensor<T>>>) -> Result<Self> {
        if targets.is_empty() {
            return Err(DsrError::Config("prediction fan needs at least one observation".into()));
        }
        if samples.len() != targets.len() {
            return Err(DsrError::Dimension(format!(
                "prediction fan: {} targets but {} sample groups",
                targets.len(),
                samples.len()
            )));
        }
        let m = samples[0].len();
        for (i, (target, group)) in targets.iter().zip(&samples).enumerate() {
            if group.len() != m {
                return Err(DsrError::Dimension(format!(
                    "prediction fan: observation {i} has {} replicates, expected {m}",
                    group.len()
                )));
            }
            for (j, s) in group.iter().enumerate() {
                if s.shape() != target.shape() {
                    return Err(DsrError::Dimension(format!(
                        "prediction fan: replicate ({i}, {j}) has shape {:?}, target has {:?}",
                        s.shape(),
                        target.shape()
                    )));
                }
            }
        }
        Ok(PredictionFan { targets, samples })
    }

    /// Convenience constructor for scalar observations.
    pub fn from_scalars(targets: &[T], samples: &[Vec<T>]) -> Result<Self> {
        let t = targets.iter().map(|&y| Tensor::scalar(y)).collect();
        let s = samples
            .iter()
            .map(|group| group.iter().map(|&v| Tensor::scalar(v)).collect())
            .collect();
        PredictionFan::new(t, s)
    }

    pub fn observations(&self) -> usize {
        self.targets.len()
    }

    /// Replicates per observation.
    pub fn m(&self) -> usize {
        self.samples[0].len()
    }

    pub fn targets(&self) -> &[Tensor<T>] {
        &self.targets
    }

    pub fn samples(&self) -> &[Vec<Tensor<T>>] {
        &self.samples
    }
}

fn require_replicates<T: Real>(fan: &PredictionFan<T>, what: &str) -> Result<()> {
    if fan.m() < 2 {
        return Err(DsrError::Config(format!(
            "{what} needs at least 2 replicates per observation to form the spread term, got {}",
            fan.m()
        )));
    }
    Ok(())
}

/// Energy score for scalar observations (every target must be a single
/// element). Uses the O(m^2) pairwise spread sum, which is the reference
/// implementation; see [`energy_loss_scalar_sorted`] for the O(m log m) path.
pub fn energy_loss_scalar<T: Real>(fan: &PredictionFan<T>) -> Result<LossValue> {
    require_replicates(fan, "energy_loss_scalar")?;
    for t in fan.targets() {
        if t.len() != 1 {
            return Err(DsrError::Dimension(format!(
                "energy_loss_scalar expects scalar observations, got shape {:?}",
                t.shape()
            )));
        }
    }
    let n = fan.observations();
    let m = fan.m();
    let mut data = 0.0f64;
    let mut spread = 0.0f64;
    for (target, group) in fan.targets().iter().zip(fan.samples()) {
        let y = target.item().to_f64();
        for s in group {
            data += (y - s.item().to_f64()).abs();
        }
        for j in 0..m {
            let sj = group[j].item().to_f64();
            for s in &group[j + 1..] {
                spread += (sj - s.item().to_f64()).abs();
            }
        }
    }
    let data_term = data / (n as f64 * m as f64);
    // the j < j' half-sum counts each unordered pair once; the symmetric
    // double sum in the definition counts it twice, cancelling the 1/2
    let spread_term = spread / (n as f64 * m as f64 * (m as f64 - 1.0));
    Ok(LossValue::from_terms(data_term, spread_term))
}

/// Same value as [`energy_loss_scalar`], computing each observation's spread
/// from the sorted replicates: for order statistics `s_(0) <= ... <= s_(m-1)`,
/// `sum_{j<j'} (s_(j') - s_(j)) = sum_k (2k - m + 1) s_(k)`.
pub fn energy_loss_scalar_sorted<T: Real>(fan: &PredictionFan<T>) -> Result<LossValue> {
    require_replicates(fan, "energy_loss_scalar_sorted")?;
    let n = fan.observations();
    let m = fan.m();
    let mut data = 0.0f64;
    let mut spread = 0.0f64;
    let mut sorted = Vec::with_capacity(m);
    for (target, group) in fan.targets().iter().zip(fan.samples()) {
        if target.len() != 1 {
            return Err(DsrError::Dimension(format!(
                "energy_loss_scalar_sorted expects scalar observations, got shape {:?}",
                target.shape()
            )));
        }
        let y = target.item().to_f64();
        sorted.clear();
        for s in group {
            let v = s.item().to_f64();
            data += (y - v).abs();
            sorted.push(v);
        }
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite loss inputs"));
        for (k, &v) in sorted.iter().enumerate() {
            spread += (2.0 * k as f64 - (m as f64 - 1.0)) * v;
        }
    }
    let data_term = data / (n as f64 * m as f64);
    let spread_term = spread / (n as f64 * m as f64 * (m as f64 - 1.0));
    Ok(LossValue::from_terms(data_term, spread_term))
}

/// Energy score with the Euclidean norm over whole per-observation tensors.
pub fn energy_loss_vector<T: Real>(fan: &PredictionFan<T>) -> Result<LossValue> {
    require_replicates(fan, "energy_loss_vector")?;
    let n = fan.observations();
    let m = fan.m();
    let mut data = 0.0f64;
    let mut spread = 0.0f64;
    for (target, group) in fan.targets().iter().zip(fan.samples()) {
        for s in group {
            data += euclidean_distance(target.data(), s.data());
        }
        for j in 0..m {
            for s in &group[j + 1..] {
                spread += euclidean_distance(group[j].data(), s.data());
            }
        }
    }
    let data_term = data / (n as f64 * m as f64);
    let spread_term = spread / (n as f64 * m as f64 * (m as f64 - 1.0));
    Ok(LossValue::from_terms(data_term, spread_term))
}

/// Pointwise mean-squared-error baseline: mean of squared component errors
/// over all observations. Requires exactly one replicate per observation
/// (the baseline is deterministic); reported with a zero spread term.
pub fn mse_loss<T: Real>(fan: &PredictionFan<T>) -> Result<LossValue> {
    if fan.m() != 1 {
        return Err(DsrError::Config(format!(
            "mse_loss expects exactly 1 prediction per observation, got {}",
            fan.m()
        )));
    }
    let mut acc = 0.0f64;
    let mut count = 0usize;
    for (target, group) in fan.targets().iter().zip(fan.samples()) {
        for (&y, &p) in target.data().iter().zip(group[0].data()) {
            let d = y.to_f64() - p.to_f64();
            acc += d * d;
        }
        count += target.len();
    }
    let mse = acc / count as f64;
    Ok(LossValue::from_terms(mse, 0.0))
}

fn euclidean_distance<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        acc += d * d;
    }
    acc.sqrt()
}

// ---------------------------------------------------------------------------
// Gradient kernels (used by the autodiff graph's fused loss nodes)
// ---------------------------------------------------------------------------

/// Unit vector `(a - b) / ||a - b||` accumulated into `out` with weight `c`;
/// contributes nothing when `a == b` (the subgradient at the kink).
fn axpy_unit_diff<T: Real>(out: &mut [T], a: &[T], b: &[T], c: f64) {
    let norm = euclidean_distance(a, b);
    if norm == 0.0 {
        return;
    }
    let scale = T::from_f64(c / norm);
    for ((o, &av), &bv) in out.iter_mut().zip(a).zip(b) {
        *o += scale * (av - bv);
    }
}

/// Energy score over element-aligned scalar observations: `y` holds n targets
/// and each of the m `samples` slices holds the matching n predictions.
/// Returns the loss and, when `with_grad`, d(loss)/d(samples[j]).
pub(crate) fn scalar_rows_loss_grad<T: Real>(
    y: &[T],
    samples: &[&[T]],
    with_grad: bool,
) -> (LossValue, Option<Vec<Vec<T>>>) {
    let n = y.len();
    let m = samples.len();
    debug_assert!(m >= 2);
    let nm = n as f64 * m as f64;
    let pair_norm = nm * (m as f64 - 1.0);

    let mut data = 0.0f64;
    let mut spread = 0.0f64;
    let mut grads = with_grad.then(|| vec![vec![T::zero(); n]; m]);

    let g_data = T::from_f64(1.0 / nm);
    let g_pair = T::from_f64(1.0 / pair_norm);
    for p in 0..n {
        let yv = y[p];
        for j in 0..m {
            let sj = samples[j][p];
            data += (sj.to_f64() - yv.to_f64()).abs();
            if let Some(gs) = grads.as_mut() {
                let sign = sign_of(sj - yv);
                gs[j][p] += g_data * sign;
            }
            for j2 in j + 1..m {
                let s2 = samples[j2][p];
                spread += (sj.to_f64() - s2.to_f64()).abs();
                if let Some(gs) = grads.as_mut() {
                    let sign = sign_of(sj - s2);
                    // total = data - spread, so pair gradients enter negated;
                    // each unordered pair appears twice in the symmetric sum
                    gs[j][p] -= g_pair * sign;
                    gs[j2][p] += g_pair * sign;
                }
            }
        }
    }
    let loss = LossValue::from_terms(data / nm, spread / pair_norm);
    (loss, grads)
}

fn sign_of<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Energy score over whole-tensor observations: `targets[i]` vs the m
/// replicate tensors `samples[i]`. Returns the loss and, when `with_grad`,
/// d(loss)/d(samples[i][j]) with the same shapes.
pub(crate) fn vector_obs_loss_grad<T: Real>(
    targets: &[&Tensor<T>],
    samples: &[Vec<&Tensor<T>>],
    with_grad: bool,
) -> (LossValue, Option<Vec<Vec<Tensor<T>>>>) {
    let n = targets.len();
    let m = samples[0].len();
    debug_assert!(m >= 2);
    let nm = n as f64 * m as f64;
    let pair_norm = nm * (m as f64 - 1.0);

    let mut data = 0.0f64;
    let mut spread = 0.0f64;
    let mut grads = with_grad.then(|| {
        samples
            .iter()
            .map(|group| group.iter().map(|s| Tensor::zeros(s.shape())).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    });

    for i in 0..n {
        let y = targets[i].data();
        for j in 0..m {
            let sj = samples[i][j].data();
            data += euclidean_distance(sj, y);
            if let Some(gs) = grads.as_mut() {
                axpy_unit_diff(gs[i][j].data_mut(), sj, y, 1.0 / nm);
            }
            for j2 in j + 1..m {
                let s2 = samples[i][j2].data();
                spread += euclidean_distance(sj, s2);
                if let Some(gs) = grads.as_mut() {
                    let (head, tail) = gs[i].split_at_mut(j2);
                    axpy_unit_diff(head[j].data_mut(), sj, s2, -1.0 / pair_norm);
                    axpy_unit_diff(tail[0].data_mut(), s2, sj, -1.0 / pair_norm);
                }
            }
        }
    }
    let loss = LossValue::from_terms(data / nm, spread / pair_norm);
    (loss, grads)
}

/// MSE over whole-tensor observations, with gradients d(mse)/d(pred).
pub(crate) fn mse_obs_loss_grad<T: Real>(
    targets: &[&Tensor<T>],
    preds: &[&Tensor<T>],
    with_grad: bool,
) -> (LossValue, Option<Vec<Tensor<T>>>) {
    let count: usize = targets.iter().map(|t| t.len()).sum();
    let mut acc = 0.0f64;
    let mut grads = with_grad.then(|| preds.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>());
    let scale = T::from_f64(2.0 / count as f64);
    for i in 0..targets.len() {
        let y = targets[i].data();
        let p = preds[i].data();
        if let Some(gs) = grads.as_mut() {
            for ((g, &pv), &yv) in gs[i].data_mut().iter_mut().zip(p).zip(y) {
                let d = pv - yv;
                acc += d.to_f64() * d.to_f64();
                *g = scale * d;
            }
        } else {
            for (&pv, &yv) in p.iter().zip(y) {
                let d = pv.to_f64() - yv.to_f64();
                acc += d * d;
            }
        }
    }
    (LossValue::from_terms(acc / count as f64, 0.0), grads)
}

// ---------------------------------------------------------------------------
// Cramer distance oracle
// ---------------------------------------------------------------------------

/// Exact squared Cramer distance between the empirical distributions of two
/// samples: the integral of `(F_a(x) - F_b(x))^2`, evaluated in closed form by
/// sweeping the merged sorted breakpoints (both ECDFs are step functions, so
/// the integrand is piecewise constant).
pub fn cramer_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(DsrError::Config("cramer_distance needs non-empty samples".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(DsrError::Numeric("cramer_distance: non-finite sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len() as f64, sb.len() as f64);

    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut cursor = f64::NEG_INFINITY;
    let mut integral = 0.0f64;
    while ia < sa.len() || ib < sb.len() {
        let next = match (sa.get(ia), sb.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        if cursor > f64::NEG_INFINITY && next > cursor {
            let diff = ia as f64 / na - ib as f64 / nb;
            integral += diff * diff * (next - cursor);
        }
        while ia < sa.len() && sa[ia] == next {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] == next {
            ib += 1;
        }
        cursor = next;
    }
    Ok(integral)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const TOL: f64 = 1e-12;

    #[test]
    fn scalar_loss_frozen_cases() {
        // Y=1, samples {0, 2}: data 1, spread 1, total 0
        let fan = PredictionFan::from_scalars(&[1.0f64], &[vec![0.0, 2.0]]).unwrap();
        let l = energy_loss_scalar(&fan).unwrap();
        assert!((l.data_term - 1.0).abs() < TOL);
        assert!((l.spread_term - 1.0).abs() < TOL);
        assert!(l.total.abs() < TOL);

        // Y=0, identical samples {1, 1}: data 1, spread 0, total 1
        let fan = PredictionFan::from_scalars(&[0.0f64], &[vec![1.0, 1.0]]).unwrap();
        let l = energy_loss_scalar(&fan).unwrap();
        assert!((l.total - 1.0).abs() < TOL);
        assert_eq!(l.spread_term, 0.0);
    }

    #[test]
    fn vector_loss_frozen_cases() {
        // Y=(0,0), samples {(1,0), (-1,0)}: data 1, spread 1, total 0
        let y = Tensor::<f64>::new(vec![2], vec![0.0, 0.0]).unwrap();
        let s1 = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let s2 = Tensor::new(vec![2], vec![-1.0, 0.0]).unwrap();
        let fan = PredictionFan::new(vec![y], vec![vec![s1, s2]]).unwrap();
        let l = energy_loss_vector(&fan).unwrap();
        assert!(l.total.abs() < TOL);

        // Y=(3,4), both samples (0,0): data = ||(3,4)|| = 5, spread 0
        let y = Tensor::<f64>::new(vec![2], vec![3.0, 4.0]).unwrap();
        let z = Tensor::zeros(&[2]);
        let fan = PredictionFan::new(vec![y], vec![vec![z.clone(), z]]).unwrap();
        let l = energy_loss_vector(&fan).unwrap();
        assert!((l.data_term - 5.0).abs() < TOL);
        assert_eq!(l.spread_term, 0.0);
        assert!((l.total - 5.0).abs() < TOL);
    }

    #[test]
    fn total_is_exactly_data_minus_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(1..5);
            let m = rng.gen_range(2..6);
            let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let samples: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(-3.0..3.0)).collect())
                .collect();
            let fan = PredictionFan::from_scalars(&targets, &samples).unwrap();
            let l = energy_loss_scalar(&fan).unwrap();
            assert_eq!(l.total, l.data_term - l.spread_term);
        }
    }

    #[test]
    fn sorted_path_matches_pairwise_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let m = rng.gen_range(2..12);
            let targets: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let samples: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let fan = PredictionFan::from_scalars(&targets, &samples).unwrap();
            let reference = energy_loss_scalar(&fan).unwrap();
            let fast = energy_loss_scalar_sorted(&fan).unwrap();
            let denom = reference.total.abs().max(1.0);
            assert!(
                (reference.total - fast.total).abs() / denom < 1e-6,
                "sorted {} vs pairwise {}",
                fast.total,
                reference.total
            );
        }
    }

    #[test]
    fn single_replicate_is_a_config_error() {
        let fan = PredictionFan::from_scalars(&[1.0f64], &[vec![0.5]]).unwrap();
        assert!(matches!(energy_loss_scalar(&fan), Err(DsrError::Config(_))));
        assert!(matches!(energy_loss_vector(&fan), Err(DsrError::Config(_))));
        // ... while mse requires exactly one
        assert!(mse_loss(&fan).is_ok());
        let fan2 = PredictionFan::from_scalars(&[1.0f64], &[vec![0.5, 0.7]]).unwrap();
        assert!(matches!(mse_loss(&fan2), Err(DsrError::Config(_))));
    }

    #[test]
    fn mse_frozen_case() {
        let y = Tensor::<f64>::new(vec![2], vec![1.0, 1.0]).unwrap();
        let p = Tensor::zeros(&[2]);
        let fan = PredictionFan::new(vec![y], vec![vec![p]]).unwrap();
        let l = mse_loss(&fan).unwrap();
        assert!((l.total - 1.0).abs() < TOL);
    }

    #[test]
    fn scalar_rows_kernel_agrees_with_public_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..8);
            let m = rng.gen_range(2..5);
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cols: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let col_refs: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
            let (kernel_loss, _) = scalar_rows_loss_grad(&y, &col_refs, false);

            let per_obs: Vec<Vec<f64>> = (0..n).map(|i| (0..m).map(|j| cols[j][i]).collect()).collect();
            let fan = PredictionFan::from_scalars(&y, &per_obs).unwrap();
            let public = energy_loss_scalar(&fan).unwrap();
            assert!((kernel_loss.total - public.total).abs() < 1e-12);
        }
    }

    #[test]
    fn cramer_point_masses_at_unit_distance() {
        assert!((cramer_distance(&[0.0], &[1.0]).unwrap() - 1.0).abs() < TOL);
    }

    #[test]
    fn cramer_zero_exactly_for_equal_ecdfs() {
        assert_eq!(cramer_distance(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // same ECDF through repetition
        assert_eq!(cramer_distance(&[1.0, 1.0, 2.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(cramer_distance(&[0.0, 1.0], &[0.0, 2.0]).unwrap() > 0.0);
    }

    #[test]
    fn cramer_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a: Vec<f64> = (0..7).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let b: Vec<f64> = (0..5).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let ab = cramer_distance(&a, &b).unwrap();
            let ba = cramer_distance(&b, &a).unwrap();
            assert!((ab - ba).abs() < TOL);
        }
    }
}
