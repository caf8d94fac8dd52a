//! Synthetic laminar-flow point clouds and measurement degradation.
//!
//! These generators stand in for solver output (clean, dense fields)
//! and for lower-quality scanner-like measurements (noisy, biased
//! fields), so the full super-resolution pipeline can run end to end
//! on reproducible data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::cloud::VelocityPointCloud;
use crate::{DsrError, Result};

/// Fraction of the lattice spacing used as uniform positional jitter.
const JITTER_FRACTION: f64 = 0.3;

/// Tube-like flow domains with an analytic parabolic velocity profile.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowGeometry {
    /// Cylinder of the given radius along the z axis, from z = 0 to
    /// z = length.
    StraightTube { radius: f64, length: f64 },
    /// Bent tube: the centerline is the arc of radius `bend_radius` in
    /// the xy plane from angle 0 to `angle` (radians, at most pi), and
    /// the tube cross-section has radius `tube_radius`.
    TorusSegment {
        tube_radius: f64,
        bend_radius: f64,
        angle: f64,
    },
}

impl FlowGeometry {
    fn validate(&self) -> Result<()> {
        match *self {
            FlowGeometry::StraightTube { radius, length } => {
                if !(radius > 0.0 && radius.is_finite()) || !(length > 0.0 && length.is_finite()) {
                    return Err(DsrError::Config(format!(
                        "straight tube needs positive radius and length, got {radius} and {length}"
                    )));
                }
            }
            FlowGeometry::TorusSegment {
                tube_radius,
                bend_radius,
                angle,
            } => {
                if !(tube_radius > 0.0 && tube_radius.is_finite()) {
                    return Err(DsrError::Config(format!(
                        "torus tube radius must be positive, got {tube_radius}"
                    )));
                }
                if !(bend_radius > tube_radius && bend_radius.is_finite()) {
                    return Err(DsrError::Config(format!(
                        "torus bend radius {bend_radius} must exceed the tube radius {tube_radius}"
                    )));
                }
                if !(angle > 0.0 && angle <= std::f64::consts::PI) {
                    return Err(DsrError::Config(format!(
                        "torus angle must lie in (0, pi], got {angle}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Smooth multiplicative intensity bias applied by the degradation
/// model: `factor(p) = base + amplitude * sin(frequency * (x+y+z))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasField {
    pub base: f64,
    pub amplitude: f64,
    pub frequency: f64,
}

impl Default for BiasField {
    fn default() -> Self {
        Self {
            base: 0.9,
            amplitude: 0.1,
            frequency: 0.5,
        }
    }
}

impl BiasField {
    /// No bias at all: factor is exactly 1 everywhere.
    pub fn identity() -> Self {
        Self {
            base: 1.0,
            amplitude: 0.0,
            frequency: 0.0,
        }
    }

    pub fn factor(&self, p: [f64; 3]) -> f64 {
        self.base + self.amplitude * (self.frequency * (p[0] + p[1] + p[2])).sin()
    }

    fn validate(&self) -> Result<()> {
        if ![self.base, self.amplitude, self.frequency]
            .iter()
            .all(|v| v.is_finite())
        {
            return Err(DsrError::Config(format!("bias field {self:?} is not finite")));
        }
        Ok(())
    }
}

/// Samples the interior of a flow geometry on a jittered lattice with
/// the given point spacing, assigning each point the parabolic profile
/// `u(r) = u_max * (1 - (r/R)^2)` along the local axis direction.
pub fn synth_flow(
    geometry: &FlowGeometry,
    spacing: f64,
    u_max: f64,
    seed: u64,
) -> Result<VelocityPointCloud> {
    geometry.validate()?;
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(DsrError::Config(format!(
            "lattice spacing must be positive, got {spacing}"
        )));
    }
    if !u_max.is_finite() {
        return Err(DsrError::Config(format!(
            "peak speed must be finite, got {u_max}"
        )));
    }
    let (min, max): ([f64; 3], [f64; 3]) = match *geometry {
        FlowGeometry::StraightTube { radius, length } => {
            ([-radius, -radius, 0.0], [radius, radius, length])
        }
        FlowGeometry::TorusSegment {
            tube_radius,
            bend_radius,
            ..
        } => {
            let reach = bend_radius + tube_radius;
            (
                [-reach, -reach, -tube_radius],
                [reach, reach, tube_radius],
            )
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts: Vec<usize> = (0..3)
        .map(|a| (((max[a] - min[a]) / spacing).ceil() as usize).max(1))
        .collect();
    let mut points = Vec::new();
    let mut velocities = Vec::new();
    for iz in 0..counts[2] {
        for iy in 0..counts[1] {
            for ix in 0..counts[0] {
                // jitter is drawn for every lattice cell before the
                // membership test so the draw sequence (and thus the
                // full cloud) depends only on the seed
                let mut p = [0.0f64; 3];
                for (a, i) in [(0, ix), (1, iy), (2, iz)] {
                    let jitter = rng.gen_range(-JITTER_FRACTION..JITTER_FRACTION) * spacing;
                    p[a] = min[a] + (i as f64 + 0.5) * spacing + jitter;
                }
                if let Some(v) = profile_velocity(geometry, p, u_max) {
                    points.push(p);
                    velocities.push(v);
                }
            }
        }
    }
    VelocityPointCloud::new(points, velocities)
}

/// Velocity at `p`, or None when `p` lies outside the geometry.
fn profile_velocity(geometry: &FlowGeometry, p: [f64; 3], u_max: f64) -> Option<[f64; 3]> {
    match *geometry {
        FlowGeometry::StraightTube { radius, length } => {
            let r2 = p[0] * p[0] + p[1] * p[1];
            if r2 > radius * radius || p[2] < 0.0 || p[2] > length {
                return None;
            }
            Some([0.0, 0.0, u_max * (1.0 - r2 / (radius * radius))])
        }
        FlowGeometry::TorusSegment {
            tube_radius,
            bend_radius,
            angle,
        } => {
            let rho = p[0].hypot(p[1]);
            let d2 = (rho - bend_radius) * (rho - bend_radius) + p[2] * p[2];
            if d2 > tube_radius * tube_radius {
                return None;
            }
            let phi = p[1].atan2(p[0]);
            if !(0.0..=angle).contains(&phi) {
                return None;
            }
            let speed = u_max * (1.0 - d2 / (tube_radius * tube_radius));
            Some([-phi.sin() * speed, phi.cos() * speed, 0.0])
        }
    }
}

/// Degrades a clean velocity field into a measurement-like one:
/// `v' = bias(p) * v + sigma_v * z` with `z` a standard normal vector,
/// drawn per point from the seed. Positions are unchanged. With
/// `sigma_v = 0` and the identity bias the cloud is returned intact.
pub fn degrade_to_4df(
    cloud: &VelocityPointCloud,
    sigma_v: f64,
    bias: &BiasField,
    seed: u64,
) -> Result<VelocityPointCloud> {
    if !(sigma_v >= 0.0 && sigma_v.is_finite()) {
        return Err(DsrError::Config(format!(
            "noise level must be non-negative, got {sigma_v}"
        )));
    }
    bias.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut velocities = Vec::with_capacity(cloud.len());
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        let v = cloud.velocity(i);
        let b = bias.factor(p);
        let mut out = [0.0f64; 3];
        for a in 0..3 {
            let z: f64 = rng.sample(StandardNormal);
            out[a] = b * v[a] + sigma_v * z;
        }
        velocities.push(out);
    }
    cloud.with_velocities(velocities)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_tube_follows_the_parabolic_profile() {
        let geom = FlowGeometry::StraightTube {
            radius: 2.0,
            length: 10.0,
        };
        let cloud = synth_flow(&geom, 0.5, 3.0, 42).unwrap();
        assert!(cloud.len() > 500, "only {} points", cloud.len());
        for i in 0..cloud.len() {
            let p = cloud.point(i);
            let v = cloud.velocity(i);
            let r2 = p[0] * p[0] + p[1] * p[1];
            assert!(r2 <= 4.0 + 1e-12);
            assert!((0.0..=10.0).contains(&p[2]));
            assert_eq!(v[0], 0.0);
            assert_eq!(v[1], 0.0);
            let want = 3.0 * (1.0 - r2 / 4.0);
            assert!((v[2] - want).abs() < 1e-12);
            assert!(v[2] <= 3.0);
        }
    }

    #[test]
    fn torus_velocities_are_tangential_with_parabolic_magnitude() {
        let geom = FlowGeometry::TorusSegment {
            tube_radius: 1.5,
            bend_radius: 5.0,
            angle: std::f64::consts::PI / 2.0,
        };
        let cloud = synth_flow(&geom, 0.4, 2.0, 7).unwrap();
        assert!(cloud.len() > 300, "only {} points", cloud.len());
        for i in 0..cloud.len() {
            let p = cloud.point(i);
            let v = cloud.velocity(i);
            let rho = p[0].hypot(p[1]);
            let d2 = (rho - 5.0) * (rho - 5.0) + p[2] * p[2];
            assert!(d2 <= 1.5 * 1.5 + 1e-12);
            let phi = p[1].atan2(p[0]);
            assert!((0.0..=std::f64::consts::PI / 2.0).contains(&phi));
            // the velocity is horizontal and orthogonal to the radial direction
            assert_eq!(v[2], 0.0);
            let radial = (v[0] * p[0] + v[1] * p[1]) / rho.max(1e-12);
            assert!(radial.abs() < 1e-9);
            let speed = (v[0] * v[0] + v[1] * v[1]).sqrt();
            let want = 2.0 * (1.0 - d2 / (1.5 * 1.5));
            assert!((speed - want).abs() < 1e-9);
        }
    }

    #[test]
    fn same_seed_reproduces_different_seed_varies() {
        let geom = FlowGeometry::StraightTube {
            radius: 1.0,
            length: 4.0,
        };
        let a = synth_flow(&geom, 0.5, 1.0, 5).unwrap();
        let b = synth_flow(&geom, 0.5, 1.0, 5).unwrap();
        let c = synth_flow(&geom, 0.5, 1.0, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_identity_bias_returns_the_cloud_unchanged() {
        let geom = FlowGeometry::StraightTube {
            radius: 1.0,
            length: 4.0,
        };
        let cloud = synth_flow(&geom, 0.4, 1.0, 1).unwrap();
        let same = degrade_to_4df(&cloud, 0.0, &BiasField::identity(), 99).unwrap();
        assert_eq!(cloud, same);
    }

    #[test]
    fn degradation_is_seeded_and_noise_has_folded_normal_magnitude() {
        let geom = FlowGeometry::StraightTube {
            radius: 3.0,
            length: 20.0,
        };
        let cloud = synth_flow(&geom, 0.5, 1.0, 2).unwrap();
        assert!(cloud.len() > 3000);
        let sigma = 0.25;
        let a = degrade_to_4df(&cloud, sigma, &BiasField::identity(), 17).unwrap();
        let b = degrade_to_4df(&cloud, sigma, &BiasField::identity(), 17).unwrap();
        assert_eq!(a, b);

        // per-component mean |delta| for N(0, sigma^2) is sigma*sqrt(2/pi);
        // the vector magnitude mean is sigma*sqrt(8/pi)
        let mut comp_sum = 0.0;
        let mut mag_sum = 0.0;
        for i in 0..cloud.len() {
            let mut m2 = 0.0;
            for c in 0..3 {
                let d = a.velocity(i)[c] - cloud.velocity(i)[c];
                comp_sum += d.abs();
                m2 += d * d;
            }
            mag_sum += m2.sqrt();
        }
        let comp_mean = comp_sum / (3 * cloud.len()) as f64;
        let mag_mean = mag_sum / cloud.len() as f64;
        let comp_want = sigma * (2.0 / std::f64::consts::PI).sqrt();
        let mag_want = sigma * (8.0 / std::f64::consts::PI).sqrt();
        assert!(
            (comp_mean - comp_want).abs() < 0.04 * comp_want,
            "component mean {comp_mean} vs {comp_want}"
        );
        assert!(
            (mag_mean - mag_want).abs() < 0.04 * mag_want,
            "magnitude mean {mag_mean} vs {mag_want}"
        );
    }

    #[test]
    fn pure_bias_rescales_velocities_pointwise() {
        let geom = FlowGeometry::StraightTube {
            radius: 1.0,
            length: 6.0,
        };
        let cloud = synth_flow(&geom, 0.4, 2.0, 3).unwrap();
        let bias = BiasField::default();
        let out = degrade_to_4df(&cloud, 0.0, &bias, 0).unwrap();
        for i in 0..cloud.len() {
            let f = bias.factor(cloud.point(i));
            assert!((0.8..=1.0).contains(&f));
            for c in 0..3 {
                let want = f * cloud.velocity(i)[c];
                assert!((out.velocity(i)[c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn invalid_geometry_and_noise_are_rejected() {
        assert!(synth_flow(
            &FlowGeometry::StraightTube {
                radius: -1.0,
                length: 1.0
            },
            0.5,
            1.0,
            0
        )
        .is_err());
        assert!(synth_flow(
            &FlowGeometry::TorusSegment {
                tube_radius: 2.0,
                bend_radius: 1.0,
                angle: 1.0
            },
            0.5,
            1.0,
            0
        )
        .is_err());
        let cloud = VelocityPointCloud::new(vec![[0.0; 3]], vec![[0.0; 3]]).unwrap();
        assert!(degrade_to_4df(&cloud, -0.1, &BiasField::identity(), 0).is_err());
    }
}
