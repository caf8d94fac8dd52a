//! Unstructured velocity point clouds and their CSV representation.

use std::fs;
use std::path::Path;

use crate::{DsrError, Result};

const CSV_HEADER: &str = "x,y,z,vx,vy,vz";

/// A set of 3-D sample locations with one velocity vector per location.
///
/// Positions are in millimetres, velocities in millimetres per second;
/// nothing in the code depends on the units beyond the coincidence
/// threshold used during voxelization.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityPointCloud {
    points: Vec<[f64; 3]>,
    velocities: Vec<[f64; 3]>,
}

impl VelocityPointCloud {
    /// Builds a cloud from parallel position/velocity arrays.
    pub fn new(points: Vec<[f64; 3]>, velocities: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() != velocities.len() {
            return Err(DsrError::Dimension(format!(
                "point cloud has {} positions but {} velocities",
                points.len(),
                velocities.len()
            )));
        }
        for (i, (p, v)) in points.iter().zip(&velocities).enumerate() {
            if !p.iter().chain(v.iter()).all(|c| c.is_finite()) {
                return Err(DsrError::Numeric(format!(
                    "non-finite coordinate in point cloud row {i}"
                )));
            }
        }
        Ok(Self { points, velocities })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn velocities(&self) -> &[[f64; 3]] {
        &self.velocities
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    pub fn velocity(&self, i: usize) -> [f64; 3] {
        self.velocities[i]
    }

    /// Replaces the velocity vectors, keeping positions fixed.
    pub fn with_velocities(&self, velocities: Vec<[f64; 3]>) -> Result<Self> {
        Self::new(self.points.clone(), velocities)
    }

    /// Reads a cloud from a `x,y,z,vx,vy,vz` CSV file with a header row.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DsrError::MissingArtifact(format!("point cloud file {}", path.display()))
            } else {
                DsrError::Io(e)
            }
        })?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == CSV_HEADER => {}
            other => {
                return Err(DsrError::Format(format!(
                    "{}: expected header '{CSV_HEADER}', found {:?}",
                    path.display(),
                    other.unwrap_or("")
                )))
            }
        }
        let mut points = Vec::new();
        let mut velocities = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = [0.0f64; 6];
            let mut it = line.split(',');
            for (k, slot) in fields.iter_mut().enumerate() {
                let raw = it.next().ok_or_else(|| {
                    DsrError::Format(format!(
                        "{} line {}: expected 6 fields, found {}",
                        path.display(),
                        lineno + 2,
                        k
                    ))
                })?;
                *slot = raw.trim().parse::<f64>().map_err(|_| {
                    DsrError::Format(format!(
                        "{} line {}: cannot parse '{}' as a number",
                        path.display(),
                        lineno + 2,
                        raw.trim()
                    ))
                })?;
            }
            if it.next().is_some() {
                return Err(DsrError::Format(format!(
                    "{} line {}: more than 6 fields",
                    path.display(),
                    lineno + 2
                )));
            }
            points.push([fields[0], fields[1], fields[2]]);
            velocities.push([fields[3], fields[4], fields[5]]);
        }
        Self::new(points, velocities)
    }

    /// Writes the cloud as CSV; values round-trip exactly through
    /// [`Self::read_csv`].
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::with_capacity(32 * self.len() + CSV_HEADER.len() + 1);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for (p, v) in self.points.iter().zip(&self.velocities) {
            // `{}` on f64 prints the shortest digits that parse back to
            // the same bits, so the file is lossless.
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p[0], p[1], p[2], v[0], v[1], v[2]
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }
}
