//! Central-difference verification of the tape's analytic gradients.
//!
//! The oracle may run at a different dtype than the analytic pass: checking an
//! f32 network against an f32 finite difference is vacuous (the difference
//! quotient itself carries ~sqrt(eps_f32) ~ 3e-4 of roundoff), so the f32
//! composites are checked against the same composite instantiated at f64 with
//! exactly-converted parameters. `grad_check` is the plain same-dtype check.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{DsrError, Real, Result};

use super::{Graph, NodeId, Tensor};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative disagreement over all probed coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates probed.
    pub probes: usize,
    /// (parameter index, flat coordinate) of the worst probe.
    pub worst_coord: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Checks d(loss)/d(params) of the composite assembled by `build` against
/// central differences of step `h`, at the same dtype. Probes `probe_count`
/// distinct coordinates chosen by `seed` (all coordinates if the parameters
/// have fewer). Relative error uses a `sqrt(machine epsilon)` guard so
/// near-zero gradients do not divide by zero.
pub fn grad_check<T: Real>(
    params: &[Tensor<T>],
    probe_count: usize,
    h: f64,
    seed: u64,
    build: impl Fn(&mut Graph<T>, &[NodeId]) -> Result<NodeId>,
) -> Result<GradCheckReport> {
    grad_check_pair::<T, T, _, _>(params, probe_count, h, seed, &build, &build)
}

/// [`grad_check`] with the finite-difference oracle evaluated at dtype `O`
/// (parameters converted exactly via f64). `A = f32, O = f64` turns the check
/// into a sound test of the f32 forward/backward code paths.
pub fn grad_check_pair<A, O, FA, FO>(
    params: &[Tensor<A>],
    probe_count: usize,
    h: f64,
    seed: u64,
    build_analytic: FA,
    build_oracle: FO,
) -> Result<GradCheckReport>
where
    A: Real,
    O: Real,
    FA: Fn(&mut Graph<A>, &[NodeId]) -> Result<NodeId>,
    FO: Fn(&mut Graph<O>, &[NodeId]) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(DsrError::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Err(DsrError::Config("grad_check needs at least one parameter coordinate".into()));
    }

    // analytic gradients at dtype A
    let analytic: Vec<Tensor<A>> = {
        let mut g = Graph::<A>::new();
        let ids: Vec<NodeId> = params.iter().map(|p| g.param(p.clone())).collect();
        let loss = build_analytic(&mut g, &ids)?;
        if g.value(loss).len() != 1 {
            return Err(DsrError::Usage(format!(
                "grad_check composite must produce a scalar loss, got shape {:?}",
                g.value(loss).shape()
            )));
        }
        if !g.value(loss).all_finite() {
            return Err(DsrError::Numeric("grad_check: non-finite loss at the base point".into()));
        }
        g.backward(loss)?;
        ids.iter()
            .zip(params)
            .map(|(&id, p)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    };

    // choose probe coordinates
    let mut coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.len()).map(move |ci| (pi, ci)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(probe_count.min(total));

    // oracle parameters at dtype O; perturbations are applied around the f64
    // image of each coordinate so +h/-h are symmetric at oracle precision
    let mut oracle_params: Vec<Tensor<O>> = params.iter().map(|p| p.convert::<O>()).collect();
    let eval = |op: &[Tensor<O>]| -> Result<f64> {
        let mut g = Graph::<O>::new();
        let ids: Vec<NodeId> = op.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build_oracle(&mut g, &ids)?;
        let v = g.value(loss).item().to_f64();
        if !v.is_finite() {
            return Err(DsrError::Numeric("grad_check: non-finite loss during probing".into()));
        }
        Ok(v)
    };

    let guard = A::epsilon().to_f64().sqrt();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: coords.len(),
        worst_coord: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for &(pi, ci) in &coords {
        let base = params[pi].data()[ci].to_f64();
        oracle_params[pi].data_mut()[ci] = O::from_f64(base + h);
        let plus = eval(&oracle_params)?;
        oracle_params[pi].data_mut()[ci] = O::from_f64(base - h);
        let minus = eval(&oracle_params)?;
        oracle_params[pi].data_mut()[ci] = O::from_f64(base);

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[pi].data()[ci].to_f64();
        let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()) + guard);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coord = (pi, ci);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;

    /// softplus(x @ w + b) summed against an MSE head: smooth everywhere, so
    /// the check must come back tight at f64.
    fn smooth_composite<T: Real>(g: &mut Graph<T>, ids: &[NodeId]) -> Result<NodeId> {
        let x = g.constant(Tensor::new(vec![4, 2], vec![
            T::from_f64(0.3), T::from_f64(-1.2),
            T::from_f64(0.9), T::from_f64(0.4),
            T::from_f64(-0.5), T::from_f64(1.1),
            T::from_f64(0.0), T::from_f64(0.7),
        ])?);
        let z = g.affine(x, ids[0], ids[1])?;
        let a = g.activation(z, Activation::Softplus)?;
        let targets = Tensor::new(vec![4, 1], vec![
            T::from_f64(0.5), T::from_f64(1.5), T::from_f64(-0.25), T::from_f64(0.75),
        ])?;
        let (loss, _) = g.mse_loss(vec![targets], vec![a])?;
        Ok(loss)
    }

    #[test]
    fn smooth_f64_composite_passes_tightly() {
        let w = Tensor::<f64>::new(vec![2, 1], vec![0.8, -0.3]).unwrap();
        let b = Tensor::<f64>::new(vec![1], vec![0.1]).unwrap();
        let report = grad_check(&[w, b], 16, 1e-5, 99, smooth_composite::<f64>).unwrap();
        assert!(report.max_rel_error < 1e-8, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn f32_analytic_with_f64_oracle_passes() {
        let w = Tensor::<f32>::new(vec![2, 1], vec![0.8, -0.3]).unwrap();
        let b = Tensor::<f32>::new(vec![1], vec![0.1]).unwrap();
        let report = grad_check_pair(
            &[w, b],
            16,
            1e-4,
            99,
            smooth_composite::<f32>,
            smooth_composite::<f64>,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // scale op with a deliberately inconsistent forward: use 2x in the
        // analytic graph but 3x in the oracle; the check must blow up
        let w = Tensor::<f64>::new(vec![1, 1], vec![0.5]).unwrap();
        let build2 = |g: &mut Graph<f64>, ids: &[NodeId]| -> Result<NodeId> {
            let s = g.scale(ids[0], 2.0)?;
            let (loss, _) = g.mse_loss(vec![Tensor::new(vec![1, 1], vec![0.0])?], vec![s])?;
            Ok(loss)
        };
        let build3 = |g: &mut Graph<f64>, ids: &[NodeId]| -> Result<NodeId> {
            let s = g.scale(ids[0], 3.0)?;
            let (loss, _) = g.mse_loss(vec![Tensor::new(vec![1, 1], vec![0.0])?], vec![s])?;
            Ok(loss)
        };
        let report = grad_check_pair(&[w], 4, 1e-5, 1, build2, build3).unwrap();
        assert!(report.max_rel_error > 0.1, "expected a large error, got {}", report.max_rel_error);
    }

    #[test]
    fn non_positive_step_is_a_config_error() {
        let w = Tensor::<f64>::new(vec![1, 1], vec![0.5]).unwrap();
        assert!(matches!(
            grad_check(&[w], 4, 0.0, 1, smooth_composite::<f64>),
            Err(DsrError::Config(_))
        ));
    }
}
