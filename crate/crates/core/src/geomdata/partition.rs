//! Covering a geometry with overlapping neighborhood patches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cloud::VelocityPointCloud;
use super::voxel::{epsilon_ball, NeighborhoodPatch};
use crate::{DsrError, Result};

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Picks patch centers by farthest-point sampling until every point is
/// within `spacing` of a center, then keeps adding centers until every
/// point is also within `epsilon` of one, so the returned epsilon-ball
/// patches cover the whole cloud. The first center is drawn from the
/// seed; everything after is deterministic given the cloud.
pub fn partition_geometry(
    cloud: &VelocityPointCloud,
    epsilon: f64,
    spacing: f64,
    seed: u64,
) -> Result<Vec<NeighborhoodPatch>> {
    if cloud.is_empty() {
        return Err(DsrError::Config("cannot partition an empty cloud".into()));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(DsrError::Config(format!(
            "patch spacing must be positive, got {spacing}"
        )));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(DsrError::Config(format!(
            "patch radius must be positive, got {epsilon}"
        )));
    }
    let n = cloud.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let first = rng.gen_range(0..n);
    let mut centers = vec![first];
    let mut min_dist: Vec<f64> = (0..n)
        .map(|k| dist(cloud.point(k), cloud.point(first)))
        .collect();
    // stop once centers are spacing-dense AND patches cover everything
    let stop = spacing.min(epsilon);
    loop {
        let (farthest, d) = min_dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &v)| {
                if v > best.1 {
                    (k, v)
                } else {
                    best
                }
            });
        if d <= stop {
            break;
        }
        centers.push(farthest);
        for k in 0..n {
            let dk = dist(cloud.point(k), cloud.point(farthest));
            if dk < min_dist[k] {
                min_dist[k] = dk;
            }
        }
    }
    centers
        .iter()
        .map(|&c| epsilon_ball(cloud, c, epsilon))
        .collect()
}

/// Finds a neighborhood radius whose median member count over sampled
/// centers is at least `target_count`, by bisection on the radius.
/// Used to pick a default `epsilon` such that typical patches have
/// enough points for the desired grid resolution.
pub fn calibrate_epsilon(
    cloud: &VelocityPointCloud,
    target_count: usize,
    sample: usize,
    seed: u64,
) -> Result<f64> {
    let n = cloud.len();
    if target_count == 0 || sample == 0 {
        return Err(DsrError::Config(
            "calibration needs a positive target count and sample size".into(),
        ));
    }
    if n < target_count {
        return Err(DsrError::Config(format!(
            "cloud has {n} points; a median neighborhood of {target_count} is unreachable"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<usize> = (0..n).collect();
    // partial Fisher-Yates: the first `sample` entries become the probe set
    let take = sample.min(n);
    for i in 0..take {
        let j = rng.gen_range(i..n);
        centers.swap(i, j);
    }
    let centers = &centers[..take];

    let median_count = |eps: f64| -> usize {
        let mut counts: Vec<usize> = centers
            .iter()
            .map(|&c| {
                let p = cloud.point(c);
                (0..n).filter(|&k| dist(cloud.point(k), p) <= eps).count()
            })
            .collect();
        counts.sort_unstable();
        counts[counts.len() / 2]
    };

    // upper bound: the cloud diameter reaches every point
    let mut lo = 0.0f64;
    let mut hi = {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for p in cloud.points() {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
        (0..3)
            .map(|a| max[a] - min[a])
            .fold(0.0f64, |s, e| s + e * e)
            .sqrt()
            .max(f64::MIN_POSITIVE)
    };
    if median_count(hi) < target_count {
        return Err(DsrError::Config(format!(
            "even radius {hi} (cloud diameter) gives a median below {target_count}"
        )));
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if median_count(mid) < target_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> VelocityPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        VelocityPointCloud::new(points, vec![[0.0; 3]; n]).unwrap()
    }

    #[test]
    fn huge_spacing_and_radius_give_one_patch_covering_all() {
        let cloud = random_cloud(100, 1);
        let patches = partition_geometry(&cloud, 10.0, 10.0, 4).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0].len(), 100);
    }

    #[test]
    fn every_point_lands_in_at_least_one_patch() {
        let cloud = random_cloud(250, 2);
        let patches = partition_geometry(&cloud, 0.35, 0.3, 9).unwrap();
        assert!(patches.len() > 1);
        let mut covered = vec![false; cloud.len()];
        for patch in &patches {
            for &m in patch.members() {
                covered[m] = true;
            }
        }
        assert!(covered.iter().all(|&c| c), "some points uncovered");
        // ... and bounding boxes contain their members
        for patch in &patches {
            let grid = crate::geomdata::make_grid(patch, &cloud).unwrap();
            for &m in patch.members() {
                assert!(grid.bbox().contains(cloud.point(m), 1e-12));
            }
        }
    }

    #[test]
    fn coverage_holds_even_when_spacing_exceeds_epsilon() {
        let cloud = random_cloud(200, 3);
        let patches = partition_geometry(&cloud, 0.25, 5.0, 1).unwrap();
        let mut covered = vec![false; cloud.len()];
        for patch in &patches {
            for &m in patch.members() {
                covered[m] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn partition_is_deterministic_in_the_seed() {
        let cloud = random_cloud(150, 4);
        let a = partition_geometry(&cloud, 0.4, 0.3, 7).unwrap();
        let b = partition_geometry(&cloud, 0.4, 0.3, 7).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.center(), y.center());
            assert_eq!(x.members(), y.members());
        }
    }

    #[test]
    fn calibrated_radius_reaches_the_target_median() {
        let cloud = random_cloud(3000, 5);
        let eps = calibrate_epsilon(&cloud, 64, 32, 11).unwrap();
        assert!(eps > 0.0 && eps < 1.8);
        // re-measure: median neighborhood size at eps meets the target
        let mut counts: Vec<usize> = (0..32)
            .map(|i| {
                let c = cloud.point(i * 7);
                (0..cloud.len())
                    .filter(|&k| {
                        let p = cloud.point(k);
                        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)
                            + (p[2] - c[2]).powi(2))
                        .sqrt();
                        d <= eps
                    })
                    .count()
            })
            .collect();
        counts.sort_unstable();
        let median = counts[counts.len() / 2];
        assert!(
            median >= 40 && median <= 160,
            "median {median} far from target 64"
        );
    }

    #[test]
    fn unreachable_targets_are_rejected() {
        let cloud = random_cloud(10, 6);
        assert!(calibrate_epsilon(&cloud, 100, 8, 0).is_err());
        assert!(partition_geometry(&cloud, 0.0, 1.0, 0).is_err());
    }
}
