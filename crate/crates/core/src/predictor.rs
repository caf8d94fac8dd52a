//! Inference: Monte-Carlo-averaged upsampling of voxel patches,
//! nearest-centroid reconstruction back onto irregular geometry, and
//! velocity-field error metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::geomdata::{PatchPair, VelocityPointCloud, VelocityTensor};
use crate::netzoo::ModelParams;
use crate::trainer::{noised_volume, NoiseSpec};
use crate::{mix_seed, DsrError, Real, Result};

/// Default grid of prediction-noise variances searched when selecting
/// the variance on held-out pairs.
pub const SIGMA2_GRID: [f64; 4] = [0.0, 0.001, 0.01, 0.05];

/// Settings for Monte-Carlo upsampling: how many noised forward
/// passes to average and under which input-noise variance.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PredictSpec {
    /// Number of forward passes averaged per prediction.
    pub samples: usize,
    /// Variance of the isotropic Gaussian noise added to the input
    /// before each pass. Zero makes the prediction a single
    /// deterministic forward pass.
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for PredictSpec {
    fn default() -> Self {
        Self {
            samples: 100,
            sigma2: 0.0,
            seed: 0,
        }
    }
}

impl PredictSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(DsrError::Config(
                "prediction needs at least one sample".into(),
            ));
        }
        if !self.sigma2.is_finite() || self.sigma2 < 0.0 {
            return Err(DsrError::Config(format!(
                "prediction noise variance must be finite and >= 0, got {}",
                self.sigma2
            )));
        }
        Ok(())
    }
}

fn ensure_finite<T: Real>(t: &Tensor<T>, sample: usize) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(DsrError::Numeric(format!(
            "non-finite model output in prediction sample {sample}"
        )))
    }
}

/// Averages `spec.samples` forward passes of `model` on independently
/// noised copies of `input`. With zero variance the average collapses
/// to one deterministic pass, so the result is then bit-identical for
/// every sample count. Accumulation runs in f64 regardless of the
/// model dtype.
pub fn mc_upsample<T: Real>(
    model: &ModelParams<T>,
    input: &VelocityTensor<T>,
    spec: &PredictSpec,
) -> Result<VelocityTensor<T>> {
    spec.validate()?;
    if spec.sigma2 == 0.0 {
        let out = model.forward_value(input.values())?;
        ensure_finite(&out, 0)?;
        return VelocityTensor::new(input.grid().clone(), out);
    }
    let noise = NoiseSpec::isotropic(spec.sigma2);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut acc = vec![0.0f64; input.values().len()];
    for j in 0..spec.samples {
        let noised = noised_volume(input.values(), &noise, &mut rng)?;
        let pred = model.forward_value(&noised)?;
        ensure_finite(&pred, j)?;
        for (a, &v) in acc.iter_mut().zip(pred.data()) {
            *a += v.to_f64();
        }
    }
    let inv = 1.0 / spec.samples as f64;
    let data: Vec<T> = acc.into_iter().map(|a| T::from_f64(a * inv)).collect();
    let values = Tensor::new(input.values().shape().to_vec(), data)?;
    VelocityTensor::new(input.grid().clone(), values)
}

/// A predicted patch volume together with the ball that defines which
/// geometry points it covers.
#[derive(Debug, Clone)]
pub struct PredictedPatch<T: Real> {
    pub tensor: VelocityTensor<T>,
    pub center: [f64; 3],
    pub epsilon: f64,
}

/// Velocities mapped back onto geometry points, with the number of
/// patches that contributed to each point.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ReconstructedField {
    velocities: Vec<[f64; 3]>,
    patch_counts: Vec<usize>,
}

impl ReconstructedField {
    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    pub fn velocities(&self) -> &[[f64; 3]] {
        &self.velocities
    }

    pub fn patch_counts(&self) -> &[usize] {
        &self.patch_counts
    }

    /// Pairs the reconstructed velocities back with their geometry
    /// points as a writable cloud.
    pub fn to_cloud(&self, points: Vec<[f64; 3]>) -> Result<VelocityPointCloud> {
        VelocityPointCloud::new(points, self.velocities.clone())
    }
}

/// Maps per-patch voxel predictions back onto irregular geometry
/// points. A patch covers every point within its ball radius; each
/// covered point takes the predicted velocity of the nearest voxel
/// centroid in every covering patch and averages them with equal
/// weights. Points no patch covers are an error (the partition is
/// supposed to cover the geometry).
pub fn reconstruct_shape<T: Real>(
    patches: &[PredictedPatch<T>],
    points: &[[f64; 3]],
) -> Result<ReconstructedField> {
    if patches.is_empty() {
        return Err(DsrError::Usage(
            "reconstruction needs at least one predicted patch".into(),
        ));
    }
    let mut velocities = vec![[0.0f64; 3]; points.len()];
    let mut patch_counts = vec![0usize; points.len()];
    let mut uncovered = 0usize;
    let mut first_uncovered = None;
    for (i, p) in points.iter().enumerate() {
        let mut sum = [0.0f64; 3];
        let mut count = 0usize;
        for patch in patches {
            let d = (0..3)
                .map(|a| (p[a] - patch.center[a]).powi(2))
                .sum::<f64>()
                .sqrt();
            if d > patch.epsilon {
                continue;
            }
            let [iz, iy, ix] = patch.tensor.grid().nearest_index(*p);
            let v = patch.tensor.value_at(iz, iy, ix);
            for a in 0..3 {
                sum[a] += v[a].to_f64();
            }
            count += 1;
        }
        if count == 0 {
            uncovered += 1;
            first_uncovered.get_or_insert((i, *p));
            continue;
        }
        let inv = 1.0 / count as f64;
        velocities[i] = [sum[0] * inv, sum[1] * inv, sum[2] * inv];
        patch_counts[i] = count;
    }
    if let Some((first_index, first_point)) = first_uncovered {
        return Err(DsrError::Coverage {
            count: uncovered,
            first_index,
            first_point,
        });
    }
    Ok(ReconstructedField {
        velocities,
        patch_counts,
    })
}

/// Mean-squared errors of a predicted velocity field against a
/// reference: per component, of the per-point speed (Euclidean norm),
/// and pooled over all components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub mse_x: f64,
    pub mse_y: f64,
    pub mse_z: f64,
    /// Mean squared difference of the per-point velocity magnitudes.
    pub mse_magnitude: f64,
    /// Mean squared error pooled over all three components (the mean
    /// of the per-component MSEs).
    pub mse_overall: f64,
}

/// Metrics between two per-point velocity lists of equal length.
pub fn evaluate_velocities(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<EvalMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(DsrError::Dimension(format!(
            "evaluate needs equal nonzero point counts, got {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mut comp = [0.0f64; 3];
    let mut mag = 0.0f64;
    for (p, t) in pred.iter().zip(truth) {
        for a in 0..3 {
            comp[a] += (p[a] - t[a]).powi(2);
        }
        let pn = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let tn = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
        mag += (pn - tn).powi(2);
    }
    Ok(EvalMetrics {
        mse_x: comp[0] / n,
        mse_y: comp[1] / n,
        mse_z: comp[2] / n,
        mse_magnitude: mag / n,
        mse_overall: (comp[0] + comp[1] + comp[2]) / (3.0 * n),
    })
}

/// Metrics between two velocity volumes of identical shape, treating
/// every voxel as a point.
pub fn evaluate_tensors<T: Real>(
    pred: &VelocityTensor<T>,
    truth: &VelocityTensor<T>,
) -> Result<EvalMetrics> {
    if pred.values().shape() != truth.values().shape() {
        return Err(DsrError::Dimension(format!(
            "evaluate needs matching volume shapes, got {:?} vs {:?}",
            pred.values().shape(),
            truth.values().shape()
        )));
    }
    let n = pred.n();
    let voxels = n * n * n;
    let gather = |t: &VelocityTensor<T>| -> Vec<[f64; 3]> {
        let d = t.values().data();
        (0..voxels)
            .map(|f| {
                [
                    d[f].to_f64(),
                    d[voxels + f].to_f64(),
                    d[2 * voxels + f].to_f64(),
                ]
            })
            .collect()
    };
    evaluate_velocities(&gather(pred), &gather(truth))
}

/// One grid-search point of the prediction-noise sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SigmaSweepEntry {
    pub sigma2: f64,
    pub mse: f64,
}

/// Mean pooled MSE of Monte-Carlo predictions over `pairs` for every
/// candidate variance in `grid`. Each candidate gets its own seed
/// stream so entries are independent and reproducible.
pub fn sigma2_sweep<T: Real>(
    model: &ModelParams<T>,
    pairs: &[PatchPair<T>],
    samples: usize,
    seed: u64,
    grid: &[f64],
) -> Result<Vec<SigmaSweepEntry>> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(DsrError::Usage(
            "the noise sweep needs at least one pair and one candidate".into(),
        ));
    }
    let mut entries = Vec::with_capacity(grid.len());
    for (gi, &sigma2) in grid.iter().enumerate() {
        let mut total = 0.0;
        for (pi, pair) in pairs.iter().enumerate() {
            let spec = PredictSpec {
                samples,
                sigma2,
                seed: mix_seed(seed, (gi * pairs.len() + pi) as u64),
            };
            let pred = mc_upsample(model, &pair.input, &spec)?;
            total += evaluate_tensors(&pred, &pair.target)?.mse_overall;
        }
        entries.push(SigmaSweepEntry {
            sigma2,
            mse: total / pairs.len() as f64,
        });
    }
    Ok(entries)
}

/// Grid search for the prediction-noise variance on held-out pairs:
/// returns the variance with the smallest pooled MSE (first entry on
/// ties) along with the full sweep.
pub fn select_sigma2<T: Real>(
    model: &ModelParams<T>,
    pairs: &[PatchPair<T>],
    samples: usize,
    seed: u64,
) -> Result<(f64, Vec<SigmaSweepEntry>)> {
    let sweep = sigma2_sweep(model, pairs, samples, seed, &SIGMA2_GRID)?;
    let best = sweep
        .iter()
        .min_by(|a, b| a.mse.partial_cmp(&b.mse).unwrap_or(std::cmp::Ordering::Equal))
        .expect("sweep is non-empty");
    Ok((best.sigma2, sweep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geomdata::{Aabb, CentroidGrid};
    use crate::netzoo::UNet3dSpec;

    fn unit_grid(t: usize) -> CentroidGrid {
        CentroidGrid::new(
            Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            t,
        )
    }

    fn constant_patch(value: [f64; 3], center: [f64; 3], epsilon: f64) -> PredictedPatch<f64> {
        let grid = unit_grid(1);
        let mut data = Vec::with_capacity(24);
        for c in value {
            data.extend(std::iter::repeat(c).take(8));
        }
        PredictedPatch {
            tensor: VelocityTensor::new(grid, Tensor::new(vec![3, 2, 2, 2], data).unwrap())
                .unwrap(),
            center,
            epsilon,
        }
    }

    fn tiny_model(seed: u64) -> ModelParams<f64> {
        ModelParams::build_unet3d(
            UNet3dSpec {
                depth: 1,
                base_channels: 2,
                kernel: 3,
                leaky_alpha: 0.01,
            },
            seed,
        )
        .unwrap()
    }

    fn random_input(seed: u64) -> VelocityTensor<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..24).map(|_| rng.gen::<f64>() - 0.5).collect();
        VelocityTensor::new(unit_grid(1), Tensor::new(vec![3, 2, 2, 2], data).unwrap()).unwrap()
    }

    #[test]
    fn zero_variance_prediction_ignores_the_sample_count() {
        let model = tiny_model(3);
        let input = random_input(1);
        let direct = model.forward_value(input.values()).unwrap();
        for samples in [1usize, 7, 100] {
            let spec = PredictSpec {
                samples,
                sigma2: 0.0,
                seed: 42,
            };
            let out = mc_upsample(&model, &input, &spec).unwrap();
            assert_eq!(out.values().data(), direct.data());
        }
    }

    #[test]
    fn single_sample_equals_one_noised_pass() {
        let model = tiny_model(5);
        let input = random_input(2);
        let spec = PredictSpec {
            samples: 1,
            sigma2: 0.02,
            seed: 11,
        };
        let out = mc_upsample(&model, &input, &spec).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noised = noised_volume(input.values(), &NoiseSpec::isotropic(0.02), &mut rng).unwrap();
        let manual = model.forward_value(&noised).unwrap();
        assert_eq!(out.values().data(), manual.data());
        // and a different seed gives a different answer
        let other = mc_upsample(
            &model,
            &input,
            &PredictSpec {
                seed: 12,
                ..spec.clone()
            },
        )
        .unwrap();
        assert_ne!(out.values().data(), other.values().data());
    }

    #[test]
    fn averaging_shrinks_toward_the_noise_free_prediction() {
        // more samples average the input noise away, so the prediction
        // should drift toward the zero-noise forward pass
        let model = tiny_model(7);
        let input = random_input(3);
        let clean = model.forward_value(input.values()).unwrap();
        let dist = |samples: usize| -> f64 {
            let spec = PredictSpec {
                samples,
                sigma2: 0.05,
                seed: 9,
            };
            let out = mc_upsample(&model, &input, &spec).unwrap();
            out.values()
                .data()
                .iter()
                .zip(clean.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        assert!(dist(400) < dist(1), "{} !< {}", dist(400), dist(1));
    }

    #[test]
    fn reconstruction_reads_the_nearest_centroid_and_averages_overlaps() {
        let a = constant_patch([1.0, 2.0, 3.0], [0.5, 0.5, 0.5], 2.0);
        let b = constant_patch([3.0, 6.0, 1.0], [0.6, 0.5, 0.5], 2.0);

        // point exactly on a centroid of a single patch: that value
        let field = reconstruct_shape(&[a.clone()], &[[0.25, 0.25, 0.75]]).unwrap();
        assert_eq!(field.velocities()[0], [1.0, 2.0, 3.0]);
        assert_eq!(field.patch_counts()[0], 1);

        // two covering patches: the equal-weight average
        let field = reconstruct_shape(&[a.clone(), b.clone()], &[[0.5, 0.5, 0.5]]).unwrap();
        assert_eq!(field.velocities()[0], [2.0, 4.0, 2.0]);
        assert_eq!(field.patch_counts()[0], 2);

        // constant field reconstructs constant everywhere inside
        let pts = vec![[0.1, 0.9, 0.4], [0.7, 0.2, 0.6], [0.5, 0.5, 0.01]];
        let field = reconstruct_shape(&[a], &pts).unwrap();
        for v in field.velocities() {
            assert_eq!(*v, [1.0, 2.0, 3.0]);
        }
    }

    #[test]
    fn reconstruction_values_stay_within_contributing_voxel_bounds() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let grid = unit_grid(2);
        let data: Vec<f64> = (0..3 * 64).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let patch = PredictedPatch {
            tensor: VelocityTensor::new(grid, Tensor::new(vec![3, 4, 4, 4], data.clone()).unwrap())
                .unwrap(),
            center: [0.5; 3],
            epsilon: 1.0,
        };
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let field = reconstruct_shape(&[patch], &pts).unwrap();
        for a in 0..3 {
            let chan = &data[a * 64..(a + 1) * 64];
            let lo = chan.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = chan.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for v in field.velocities() {
                assert!(v[a] >= lo && v[a] <= hi);
            }
        }
    }

    #[test]
    fn uncovered_points_raise_a_coverage_error() {
        let patch = constant_patch([1.0, 0.0, 0.0], [0.5, 0.5, 0.5], 0.2);
        let pts = vec![[0.5, 0.5, 0.5], [9.0, 9.0, 9.0], [8.0, 8.0, 8.0]];
        match reconstruct_shape(&[patch], &pts).unwrap_err() {
            DsrError::Coverage {
                count,
                first_index,
                first_point,
            } => {
                assert_eq!(count, 2);
                assert_eq!(first_index, 1);
                assert_eq!(first_point, [9.0, 9.0, 9.0]);
            }
            other => panic!("expected a coverage error, got {other:?}"),
        }
    }

    #[test]
    fn metrics_match_hand_computed_values_and_are_symmetric() {
        let truth = vec![[3.0, 4.0, 0.0]];
        let pred = vec![[0.0, 0.0, 0.0]];
        let m = evaluate_velocities(&pred, &truth).unwrap();
        assert_eq!(m.mse_x, 9.0);
        assert_eq!(m.mse_y, 16.0);
        assert_eq!(m.mse_z, 0.0);
        assert_eq!(m.mse_magnitude, 25.0);
        assert!((m.mse_overall - 25.0 / 3.0).abs() < 1e-15);

        // identical fields give exact zeros
        let z = evaluate_velocities(&truth, &truth).unwrap();
        assert_eq!(
            (z.mse_x, z.mse_y, z.mse_z, z.mse_magnitude, z.mse_overall),
            (0.0, 0.0, 0.0, 0.0, 0.0)
        );

        // swapping prediction and truth leaves every MSE unchanged
        let fwd = evaluate_velocities(&pred, &truth).unwrap();
        let rev = evaluate_velocities(&truth, &pred).unwrap();
        assert_eq!(fwd, rev);

        // permuting points changes nothing
        let p2 = vec![[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]];
        let t2 = vec![[0.0, 0.0, 1.0], [1.5, 1.0, -1.0]];
        let p2r: Vec<_> = p2.iter().rev().cloned().collect();
        let t2r: Vec<_> = t2.iter().rev().cloned().collect();
        assert_eq!(
            evaluate_velocities(&p2, &t2).unwrap(),
            evaluate_velocities(&p2r, &t2r).unwrap()
        );

        assert!(evaluate_velocities(&p2, &truth).is_err());
    }

    #[test]
    fn tensor_metrics_agree_with_point_metrics() {
        let grid = unit_grid(1);
        let pred_data: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let truth_data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.07).sin()).collect();
        let pred = VelocityTensor::new(
            grid.clone(),
            Tensor::new(vec![3, 2, 2, 2], pred_data.clone()).unwrap(),
        )
        .unwrap();
        let truth = VelocityTensor::new(
            grid,
            Tensor::new(vec![3, 2, 2, 2], truth_data.clone()).unwrap(),
        )
        .unwrap();
        let m = evaluate_tensors(&pred, &truth).unwrap();
        let gather = |d: &[f64]| -> Vec<[f64; 3]> {
            (0..8).map(|f| [d[f], d[8 + f], d[16 + f]]).collect()
        };
        let expect = evaluate_velocities(&gather(&pred_data), &gather(&truth_data)).unwrap();
        assert_eq!(m, expect);
    }

    #[test]
    fn sigma_selection_sweeps_the_full_grid_and_picks_the_minimum() {
        let model = tiny_model(2);
        let input = random_input(4);
        // target = the model's clean prediction, so sigma2 = 0 is optimal
        let target = VelocityTensor::new(
            input.grid().clone(),
            model.forward_value(input.values()).unwrap(),
        )
        .unwrap();
        let pairs = vec![PatchPair {
            input,
            target,
            level: 1,
            patch_id: 0,
        }];
        let (best, sweep) = select_sigma2(&model, &pairs, 8, 7).unwrap();
        assert_eq!(sweep.len(), 4);
        assert_eq!(
            sweep.iter().map(|e| e.sigma2).collect::<Vec<_>>(),
            SIGMA2_GRID.to_vec()
        );
        assert_eq!(best, 0.0);
        assert_eq!(sweep[0].mse, 0.0);
        assert!(sweep[1..].iter().all(|e| e.mse > 0.0));
    }
}
