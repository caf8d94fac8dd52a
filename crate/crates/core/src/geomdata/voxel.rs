//! Epsilon-ball neighborhoods and adaptive-resolution voxelization.
//!
//! Each patch of the geometry is voxelized onto a grid whose resolution
//! `2^t` adapts to the local point count, so dense regions get fine
//! grids and sparse regions coarse ones. All patches are then resized
//! to a common resolution for the volumetric networks.

use serde::{Deserialize, Serialize};

use super::cloud::VelocityPointCloud;
use crate::diffcore::Tensor;
use crate::{DsrError, Real, Result};

/// Distance below which a centroid is considered to sit exactly on a
/// sample point and inherits its velocity verbatim (millimetres).
pub const COINCIDENCE_EPS: f64 = 1e-9;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Largest `t` such that a `2^t` cubic grid has no more cells than
/// there are points, i.e. `⌊log2(count)/3⌋`.
pub(crate) fn resolution_exponent(count: usize) -> usize {
    let mut t = 0usize;
    while (1u128 << (3 * (t + 1))) <= count as u128 {
        t += 1;
    }
    t
}

/// All points of a cloud within radius `epsilon` of a chosen center
/// point, plus the grid resolution exponent derived from the member
/// count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborhoodPatch {
    center: usize,
    members: Vec<usize>,
    epsilon_bits: u64,
    t: usize,
}

impl NeighborhoodPatch {
    /// Index of the center point in the original cloud.
    pub fn center(&self) -> usize {
        self.center
    }

    /// Member indices in ascending order; always contains the center.
    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn epsilon(&self) -> f64 {
        f64::from_bits(self.epsilon_bits)
    }

    /// Grid resolution exponent: the patch voxelizes onto a
    /// `2^t × 2^t × 2^t` grid.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Collects the neighborhood of `center` with inclusive radius
/// `epsilon` and derives the patch resolution from the member count.
pub fn epsilon_ball(
    cloud: &VelocityPointCloud,
    center: usize,
    epsilon: f64,
) -> Result<NeighborhoodPatch> {
    if center >= cloud.len() {
        return Err(DsrError::Dimension(format!(
            "center index {center} out of range for cloud of {} points",
            cloud.len()
        )));
    }
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(DsrError::Config(format!(
            "neighborhood radius must be positive and finite, got {epsilon}"
        )));
    }
    let c = cloud.point(center);
    let members: Vec<usize> = (0..cloud.len())
        .filter(|&k| dist(cloud.point(k), c) <= epsilon)
        .collect();
    let t = resolution_exponent(members.len());
    Ok(NeighborhoodPatch {
        center,
        members,
        epsilon_bits: epsilon.to_bits(),
        t,
    })
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn contains(&self, p: [f64; 3], tol: f64) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] - tol && p[a] <= self.max[a] + tol)
    }
}

/// A `2^t` per-axis grid of cell centroids inside a bounding box.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidGrid {
    bbox: Aabb,
    t: usize,
}

impl CentroidGrid {
    pub fn new(bbox: Aabb, t: usize) -> Self {
        Self { bbox, t }
    }

    pub fn bbox(&self) -> &Aabb {
        &self.bbox
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// Cells per axis (`2^t`).
    pub fn n(&self) -> usize {
        1 << self.t
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let e = self.bbox.extent();
        let n = self.n() as f64;
        [e[0] / n, e[1] / n, e[2] / n]
    }

    /// Centroid of cell `(iz, iy, ix)`; `ix` runs along the x axis.
    pub fn centroid(&self, iz: usize, iy: usize, ix: usize) -> [f64; 3] {
        let cell = self.cell_size();
        [
            self.bbox.min[0] + (ix as f64 + 0.5) * cell[0],
            self.bbox.min[1] + (iy as f64 + 0.5) * cell[1],
            self.bbox.min[2] + (iz as f64 + 0.5) * cell[2],
        ]
    }

    /// Grid cell `(iz, iy, ix)` whose centroid is nearest to `p`,
    /// clamped to the grid bounds.
    pub fn nearest_index(&self, p: [f64; 3]) -> [usize; 3] {
        let cell = self.cell_size();
        let n = self.n();
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = if cell[a] > 0.0 {
                (p[a] - self.bbox.min[a]) / cell[a]
            } else {
                0.0
            };
            idx[a] = (rel.floor().max(0.0) as usize).min(n - 1);
        }
        [idx[2], idx[1], idx[0]]
    }
}

/// Builds the patch's centroid grid: the tight bounding box of the
/// member points split into `2^t` cells per axis. Axes with zero
/// extent are inflated symmetrically (1e-6 of the largest extent, or
/// 1 mm when every axis is degenerate) so cell geometry stays
/// well-defined.
pub fn make_grid(patch: &NeighborhoodPatch, cloud: &VelocityPointCloud) -> Result<CentroidGrid> {
    if patch.is_empty() {
        return Err(DsrError::Dimension("patch has no members".into()));
    }
    for &m in patch.members() {
        if m >= cloud.len() {
            return Err(DsrError::Dimension(format!(
                "patch member {m} out of range for cloud of {} points",
                cloud.len()
            )));
        }
    }
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for &m in patch.members() {
        let p = cloud.point(m);
        for a in 0..3 {
            min[a] = min[a].min(p[a]);
            max[a] = max[a].max(p[a]);
        }
    }
    let widest = (0..3).map(|a| max[a] - min[a]).fold(0.0f64, f64::max);
    let pad = if widest > 0.0 { 1e-6 * widest } else { 1.0 };
    for a in 0..3 {
        if max[a] - min[a] == 0.0 {
            min[a] -= 0.5 * pad;
            max[a] += 0.5 * pad;
        }
    }
    Ok(CentroidGrid::new(Aabb { min, max }, patch.t()))
}

/// A voxelized velocity field: one 3-vector per grid cell, stored as a
/// `[3, n, n, n]` tensor (channels first, x fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityTensor<T: Real> {
    grid: CentroidGrid,
    values: Tensor<T>,
}

impl<T: Real> VelocityTensor<T> {
    pub fn new(grid: CentroidGrid, values: Tensor<T>) -> Result<Self> {
        let n = grid.n();
        if values.shape() != [3, n, n, n] {
            return Err(DsrError::Dimension(format!(
                "velocity tensor shape {:?} does not match grid resolution {n}",
                values.shape()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &CentroidGrid {
        &self.grid
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn n(&self) -> usize {
        self.grid.n()
    }

    /// Same grid, different values (e.g. a model prediction on this
    /// patch).
    pub fn with_values(&self, values: Tensor<T>) -> Result<Self> {
        Self::new(self.grid.clone(), values)
    }

    /// Velocity vector stored at cell `(iz, iy, ix)`.
    pub fn value_at(&self, iz: usize, iy: usize, ix: usize) -> [T; 3] {
        let n = self.n();
        let stride = n * n * n;
        let flat = (iz * n + iy) * n + ix;
        let d = self.values.data();
        [d[flat], d[stride + flat], d[2 * stride + flat]]
    }
}

/// Fills the grid with velocities by inverse-distance weighting over
/// all patch members; a centroid lying on a sample point (distance
/// below [`COINCIDENCE_EPS`]) copies that point's velocity exactly,
/// lowest member index first.
pub fn assign_velocities<T: Real>(
    patch: &NeighborhoodPatch,
    grid: &CentroidGrid,
    cloud: &VelocityPointCloud,
) -> Result<VelocityTensor<T>> {
    if patch.is_empty() {
        return Err(DsrError::Dimension("patch has no members".into()));
    }
    let pts: Vec<[f64; 3]> = patch.members().iter().map(|&m| cloud.point(m)).collect();
    let vels: Vec<[f64; 3]> = patch.members().iter().map(|&m| cloud.velocity(m)).collect();
    let n = grid.n();
    let stride = n * n * n;
    let mut data = vec![T::zero(); 3 * stride];
    let mut dists = vec![0.0f64; pts.len()];
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let g = grid.centroid(iz, iy, ix);
                let mut coincident = None;
                for (i, p) in pts.iter().enumerate() {
                    let d = dist(*p, g);
                    if d < COINCIDENCE_EPS {
                        coincident = Some(i);
                        break;
                    }
                    dists[i] = d;
                }
                let v = match coincident {
                    Some(i) => vels[i],
                    None => {
                        let mut wsum = 0.0;
                        let mut acc = [0.0f64; 3];
                        for (i, d) in dists.iter().enumerate() {
                            let w = 1.0 / d;
                            wsum += w;
                            for a in 0..3 {
                                acc[a] += w * vels[i][a];
                            }
                        }
                        [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]
                    }
                };
                let flat = (iz * n + iy) * n + ix;
                for a in 0..3 {
                    data[a * stride + flat] = T::from_f64(v[a]);
                }
            }
        }
    }
    VelocityTensor::new(grid.clone(), Tensor::new(vec![3, n, n, n], data)?)
}

/// Upsamples a velocity tensor from resolution `2^t` to `2^big_t` by
/// nearest-neighbor replication; the bounding box is unchanged.
pub fn resize_nearest<T: Real>(
    tensor: &VelocityTensor<T>,
    big_t: usize,
) -> Result<VelocityTensor<T>> {
    let t = tensor.grid().t();
    if big_t < t {
        return Err(DsrError::Config(format!(
            "cannot resize a 2^{t} tensor down to 2^{big_t}; target resolution must not be coarser"
        )));
    }
    if big_t == t {
        return Ok(tensor.clone());
    }
    let shift = big_t - t;
    let n_in = tensor.n();
    let n_out = 1usize << big_t;
    let in_stride = n_in * n_in * n_in;
    let out_stride = n_out * n_out * n_out;
    let src = tensor.values().data();
    let mut data = vec![T::zero(); 3 * out_stride];
    for c in 0..3 {
        for z in 0..n_out {
            for y in 0..n_out {
                let row_in = c * in_stride + ((z >> shift) * n_in + (y >> shift)) * n_in;
                let row_out = c * out_stride + (z * n_out + y) * n_out;
                for x in 0..n_out {
                    data[row_out + x] = src[row_in + (x >> shift)];
                }
            }
        }
    }
    let grid = CentroidGrid::new(*tensor.grid().bbox(), big_t);
    VelocityTensor::new(grid, Tensor::new(vec![3, n_out, n_out, n_out], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_from(points: Vec<[f64; 3]>, velocities: Vec<[f64; 3]>) -> VelocityPointCloud {
        VelocityPointCloud::new(points, velocities).unwrap()
    }

    fn random_cloud(n: usize, seed: u64) -> VelocityPointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()])
            .collect();
        let velocities = (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                    rng.gen::<f64>() * 2.0 - 1.0,
                ]
            })
            .collect();
        cloud_from(points, velocities)
    }

    #[test]
    fn resolution_exponent_brackets() {
        for (count, want) in [
            (1, 0),
            (7, 0),
            (8, 1),
            (63, 1),
            (64, 2),
            (511, 2),
            (512, 3),
            (4095, 3),
            (4096, 4),
        ] {
            assert_eq!(resolution_exponent(count), want, "count {count}");
        }
    }

    #[test]
    fn epsilon_ball_is_inclusive_at_the_boundary() {
        let cloud = cloud_from(
            vec![[0.0; 3], [1.0, 0.0, 0.0], [1.0 + 1e-9, 0.0, 0.0], [0.3; 3]],
            vec![[0.0; 3]; 4],
        );
        let patch = epsilon_ball(&cloud, 0, 1.0).unwrap();
        assert_eq!(patch.members(), &[0, 1, 3]);
        assert_eq!(patch.center(), 0);
        assert_eq!(patch.t(), 0);
        assert!(epsilon_ball(&cloud, 0, 0.0).is_err());
        assert!(epsilon_ball(&cloud, 9, 1.0).is_err());
    }

    #[test]
    fn unit_cube_grid_centroids() {
        let corners: Vec<[f64; 3]> = (0..8)
            .map(|i| {
                [
                    (i & 1) as f64,
                    ((i >> 1) & 1) as f64,
                    ((i >> 2) & 1) as f64,
                ]
            })
            .collect();
        let cloud = cloud_from(corners, vec![[0.0; 3]; 8]);
        let patch = epsilon_ball(&cloud, 0, 2.0).unwrap();
        assert_eq!(patch.len(), 8);
        assert_eq!(patch.t(), 1);
        let grid = make_grid(&patch, &cloud).unwrap();
        for iz in 0..2 {
            for iy in 0..2 {
                for ix in 0..2 {
                    let c = grid.centroid(iz, iy, ix);
                    let want = [
                        0.25 + 0.5 * ix as f64,
                        0.25 + 0.5 * iy as f64,
                        0.25 + 0.5 * iz as f64,
                    ];
                    assert_eq!(c, want);
                }
            }
        }
        // every centroid strictly inside the box
        for iz in 0..2 {
            for iy in 0..2 {
                for ix in 0..2 {
                    let c = grid.centroid(iz, iy, ix);
                    for a in 0..3 {
                        assert!(c[a] > grid.bbox().min[a] && c[a] < grid.bbox().max[a]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_point_grid_inflates_to_the_point_itself() {
        let cloud = cloud_from(vec![[3.5, -1.25, 7.0]], vec![[1.0, 2.0, 3.0]]);
        let patch = epsilon_ball(&cloud, 0, 1.0).unwrap();
        assert_eq!(patch.t(), 0);
        let grid = make_grid(&patch, &cloud).unwrap();
        let c = grid.centroid(0, 0, 0);
        for a in 0..3 {
            assert!((c[a] - cloud.point(0)[a]).abs() < 1e-9);
            assert!(grid.bbox().extent()[a] > 0.0);
        }
        // the lone sample is coincident, so assignment copies it exactly
        let vt: VelocityTensor<f64> = assign_velocities(&patch, &grid, &cloud).unwrap();
        assert_eq!(vt.value_at(0, 0, 0), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn planar_neighborhood_inflates_only_the_flat_axis() {
        let cloud = cloud_from(
            vec![[0.0, 0.0, 2.0], [4.0, 0.0, 2.0], [0.0, 3.0, 2.0]],
            vec![[0.0; 3]; 3],
        );
        let patch = epsilon_ball(&cloud, 0, 10.0).unwrap();
        let grid = make_grid(&patch, &cloud).unwrap();
        let e = grid.bbox().extent();
        assert_eq!(e[0], 4.0);
        assert_eq!(e[1], 3.0);
        assert!((e[2] - 4.0e-6).abs() < 1e-12);
    }

    #[test]
    fn idw_weights_match_hand_computation() {
        // centroid at (1,0,0); members at distances 1 and 3
        let cloud = cloud_from(
            vec![[0.0, 0.0, 0.0], [4.0, 0.0, 0.0]],
            vec![[8.0, 0.0, -4.0], [0.0, 4.0, 4.0]],
        );
        let patch = epsilon_ball(&cloud, 0, 5.0).unwrap();
        let grid = CentroidGrid::new(
            Aabb {
                min: [0.0, -0.5, -0.5],
                max: [2.0, 0.5, 0.5],
            },
            0,
        );
        let vt: VelocityTensor<f64> = assign_velocities(&patch, &grid, &cloud).unwrap();
        let v = vt.value_at(0, 0, 0);
        // weights 0.75 and 0.25
        assert!((v[0] - 6.0).abs() < 1e-12);
        assert!((v[1] - 1.0).abs() < 1e-12);
        assert!((v[2] - -2.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_centroid_inherits_exactly_with_lowest_index_winning() {
        // grid centroid lands exactly on points 0 and 1 (duplicates)
        let p = [0.5, 0.5, 0.5];
        let cloud = cloud_from(
            vec![p, p, [0.9, 0.1, 0.2]],
            vec![
                [0.1 + 0.2, -7.25, 1e-3],
                [9.0, 9.0, 9.0],
                [1.0, 1.0, 1.0],
            ],
        );
        let patch = epsilon_ball(&cloud, 0, 2.0).unwrap();
        let grid = CentroidGrid::new(
            Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            0,
        );
        let vt: VelocityTensor<f64> = assign_velocities(&patch, &grid, &cloud).unwrap();
        let v = vt.value_at(0, 0, 0);
        let want = cloud.velocity(0);
        for a in 0..3 {
            assert_eq!(v[a].to_bits(), want[a].to_bits());
        }
    }

    #[test]
    fn idw_is_a_convex_combination_with_normalized_weights() {
        let cloud = random_cloud(60, 11);
        let patch = epsilon_ball(&cloud, 0, 2.0).unwrap();
        assert_eq!(patch.len(), 60);
        let grid = make_grid(&patch, &cloud).unwrap();
        let vt: VelocityTensor<f64> = assign_velocities(&patch, &grid, &cloud).unwrap();
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in cloud.velocities() {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        let n = grid.n();
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let v = vt.value_at(iz, iy, ix);
                    for a in 0..3 {
                        assert!(v[a] >= lo[a] - 1e-9 && v[a] <= hi[a] + 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn translating_the_cloud_shifts_the_grid_but_not_the_values() {
        let cloud = random_cloud(50, 3);
        let shift = [10.0, -5.0, 2.5];
        let moved = cloud_from(
            cloud
                .points()
                .iter()
                .map(|p| [p[0] + shift[0], p[1] + shift[1], p[2] + shift[2]])
                .collect(),
            cloud.velocities().to_vec(),
        );
        let pa = epsilon_ball(&cloud, 4, 2.0).unwrap();
        let pb = epsilon_ball(&moved, 4, 2.0).unwrap();
        assert_eq!(pa.members(), pb.members());
        let ga = make_grid(&pa, &cloud).unwrap();
        let gb = make_grid(&pb, &moved).unwrap();
        let va: VelocityTensor<f64> = assign_velocities(&pa, &ga, &cloud).unwrap();
        let vb: VelocityTensor<f64> = assign_velocities(&pb, &gb, &moved).unwrap();
        for (x, y) in va.values().data().iter().zip(vb.values().data()) {
            assert!((x - y).abs() < 1e-6);
        }
        let n = ga.n();
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let ca = ga.centroid(iz, iy, ix);
                    let cb = gb.centroid(iz, iy, ix);
                    for a in 0..3 {
                        assert!((ca[a] + shift[a] - cb[a]).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn resize_replicates_blocks_and_rejects_shrinking() {
        let grid = CentroidGrid::new(
            Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            1,
        );
        let mut data = Vec::with_capacity(3 * 8);
        for c in 0..3 {
            for v in 0..8 {
                data.push((c * 8 + v) as f64);
            }
        }
        let vt = VelocityTensor::new(grid, Tensor::new(vec![3, 2, 2, 2], data).unwrap()).unwrap();
        let up = resize_nearest(&vt, 2).unwrap();
        assert_eq!(up.values().shape(), [3, 4, 4, 4]);
        for iz in 0..4 {
            for iy in 0..4 {
                for ix in 0..4 {
                    let got = up.value_at(iz, iy, ix);
                    let want = vt.value_at(iz / 2, iy / 2, ix / 2);
                    assert_eq!(got, want);
                }
            }
        }
        // identity at equal resolution
        let same = resize_nearest(&vt, 1).unwrap();
        assert_eq!(same.values().data(), vt.values().data());
        assert!(matches!(
            resize_nearest(&up, 1).unwrap_err(),
            DsrError::Config(_)
        ));
    }

    #[test]
    fn nearest_index_inverts_centroids_and_clamps() {
        let grid = CentroidGrid::new(
            Aabb {
                min: [-1.0, 0.0, 2.0],
                max: [1.0, 4.0, 3.0],
            },
            2,
        );
        for iz in 0..4 {
            for iy in 0..4 {
                for ix in 0..4 {
                    let c = grid.centroid(iz, iy, ix);
                    assert_eq!(grid.nearest_index(c), [iz, iy, ix]);
                }
            }
        }
        assert_eq!(grid.nearest_index([-50.0, -50.0, -50.0]), [0, 0, 0]);
        assert_eq!(grid.nearest_index([50.0, 50.0, 50.0]), [3, 3, 3]);
    }
}
