//! Dataset assembly and persistence.
//!
//! A dataset directory contains the generated clouds (CSV), one pair
//! of velocity tensors per patch and level (binary tensor files), one
//! JSON sidecar per pair describing the patch geometry, and a single
//! `manifest.json` tying everything together.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cloud::VelocityPointCloud;
use super::partition::{calibrate_epsilon, partition_geometry};
use super::pyramid::{downsample_pyramid, PatchPair};
use super::synth::{degrade_to_4df, synth_flow, BiasField, FlowGeometry};
use super::voxel::{
    assign_velocities, make_grid, resize_nearest, Aabb, CentroidGrid, NeighborhoodPatch,
};
use crate::diffcore::io::{read_tensor, write_tensor};
use crate::{mix_seed, DsrError, Real, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "dsr-dataset";
const MANIFEST_VERSION: u32 = 1;

/// Which stage of the pipeline a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Coarsened-clean pairs used for the initial training phase.
    Pretrain,
    /// Held-out coarsened-clean pairs for monitoring pretraining.
    Validation,
    /// Degraded-measurement pairs used to adapt the model.
    Finetune,
    /// Degraded-measurement pairs never touched by training.
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::Validation => "validation",
            Split::Finetune => "finetune",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = DsrError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Split::Pretrain),
            "validation" => Ok(Split::Validation),
            "finetune" => Ok(Split::Finetune),
            "test" => Ok(Split::Test),
            other => Err(DsrError::Config(format!(
                "unknown split '{other}' (expected pretrain, validation, finetune or test)"
            ))),
        }
    }
}

/// Geometry metadata stored next to each tensor pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchSidecar {
    pub patch_id: usize,
    pub center_index: usize,
    pub center: [f64; 3],
    pub epsilon: f64,
    pub member_count: usize,
    /// Native grid resolution exponent of the patch.
    pub t: usize,
    /// Common resolution exponent the tensors were resized to.
    pub big_t: usize,
    /// Resolution gap of the input in octaves.
    pub level: usize,
    pub split: Split,
    pub bbox: Aabb,
}

/// One input/target tensor pair on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchRecord {
    pub patch_id: usize,
    pub level: usize,
    pub split: Split,
    pub input_file: String,
    pub target_file: String,
    pub sidecar_file: String,
}

/// Everything needed to build a dataset from scratch. All fields have
/// defaults, so a JSON config may specify only what it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetBuildConfig {
    /// Geometry whose clean field is used for pretraining pairs.
    pub pretrain_geometry: FlowGeometry,
    /// Geometry used for the fine-tune/test measurement pairs.
    pub transfer_geometry: FlowGeometry,
    /// Lattice spacing of the synthetic clouds (mm).
    pub spacing: f64,
    /// Peak speed of the parabolic profiles.
    pub u_max: f64,
    /// Common grid resolution exponent: tensors are 2^big_t per axis.
    pub big_t: usize,
    /// Number of pyramid levels for pretraining pairs.
    pub levels: usize,
    /// Patch radius; None calibrates it so the median neighborhood
    /// holds about 8^big_t points.
    pub epsilon: Option<f64>,
    /// Farthest-point spacing between patch centers, as a multiple of
    /// epsilon.
    pub patch_spacing_factor: f64,
    /// Octaves of resolution lost by the degraded measurement inputs.
    pub coarsen: usize,
    /// Gaussian noise level of the degraded velocities.
    pub sigma_v: f64,
    /// Multiplicative bias of the degraded velocities.
    pub bias: BiasField,
    /// Fraction of pretraining patches held out for validation.
    pub validation_fraction: f64,
    /// Fraction of transfer patches used for fine-tuning (the rest
    /// become the test set).
    pub finetune_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetBuildConfig {
    fn default() -> Self {
        Self {
            pretrain_geometry: FlowGeometry::StraightTube {
                radius: 2.0,
                length: 12.0,
            },
            transfer_geometry: FlowGeometry::TorusSegment {
                tube_radius: 2.0,
                bend_radius: 6.0,
                angle: std::f64::consts::PI / 2.0,
            },
            spacing: 0.25,
            u_max: 1.0,
            big_t: 4,
            levels: 4,
            epsilon: None,
            patch_spacing_factor: 1.0,
            coarsen: 1,
            sigma_v: 0.05,
            bias: BiasField::default(),
            validation_fraction: 0.2,
            finetune_fraction: 0.15,
            seed: 0,
        }
    }
}

impl DatasetBuildConfig {
    pub fn validate(&self) -> Result<()> {
        if self.big_t == 0 || self.big_t > 7 {
            return Err(DsrError::Config(format!(
                "resolution exponent must be in 1..=7, got {}",
                self.big_t
            )));
        }
        if self.levels == 0 || self.levels > self.big_t {
            return Err(DsrError::Config(format!(
                "level count must be in 1..={}, got {}",
                self.big_t, self.levels
            )));
        }
        if self.coarsen == 0 || self.coarsen > self.big_t {
            return Err(DsrError::Config(format!(
                "coarsen must be in 1..={}, got {}",
                self.big_t, self.coarsen
            )));
        }
        if let Some(eps) = self.epsilon {
            if !(eps > 0.0 && eps.is_finite()) {
                return Err(DsrError::Config(format!(
                    "patch radius must be positive, got {eps}"
                )));
            }
        }
        if !(self.patch_spacing_factor > 0.0 && self.patch_spacing_factor.is_finite()) {
            return Err(DsrError::Config(format!(
                "patch spacing factor must be positive, got {}",
                self.patch_spacing_factor
            )));
        }
        for (name, f) in [
            ("validation_fraction", self.validation_fraction),
            ("finetune_fraction", self.finetune_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(DsrError::Config(format!(
                    "{name} must lie strictly between 0 and 1, got {f}"
                )));
            }
        }
        Ok(())
    }
}

/// Index of a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub config: DatasetBuildConfig,
    /// Patch radius actually used (calibrated when the config left it
    /// unset).
    pub epsilon: f64,
    pub pretrain_patches: usize,
    pub transfer_patches: usize,
    pub pretrain_cloud: String,
    pub transfer_clean_cloud: String,
    pub transfer_degraded_cloud: String,
    pub records: Vec<PatchRecord>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT {
            return Err(DsrError::Format(format!(
                "manifest format '{}' (expected '{MANIFEST_FORMAT}')",
                self.format
            )));
        }
        if self.version != MANIFEST_VERSION {
            return Err(DsrError::Format(format!(
                "manifest version {} (expected {MANIFEST_VERSION})",
                self.version
            )));
        }
        let total = self.pretrain_patches + self.transfer_patches;
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if r.patch_id >= total {
                return Err(DsrError::Format(format!(
                    "record references patch {} but only {total} patches exist",
                    r.patch_id
                )));
            }
            if !seen.insert((r.patch_id, r.level)) {
                return Err(DsrError::Format(format!(
                    "duplicate record for patch {} level {}",
                    r.patch_id, r.level
                )));
            }
            if r.input_file.is_empty() || r.target_file.is_empty() || r.sidecar_file.is_empty() {
                return Err(DsrError::Format(format!(
                    "record for patch {} has an empty file path",
                    r.patch_id
                )));
            }
        }
        for split in [Split::Pretrain, Split::Validation, Split::Finetune, Split::Test] {
            if !self.records.iter().any(|r| r.split == split) {
                return Err(DsrError::Format(format!(
                    "dataset has no {} records",
                    split.as_str()
                )));
            }
        }
        Ok(())
    }

    pub fn records_for(&self, split: Split) -> Vec<&PatchRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DsrError::MissingArtifact(format!("dataset manifest {}", path.display()))
            } else {
                DsrError::Io(e)
            }
        })?;
        let manifest: Self = serde_json::from_str(&text)
            .map_err(|e| DsrError::Format(format!("{}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Loads the sidecar of a record.
    pub fn load_sidecar(&self, dir: &Path, record: &PatchRecord) -> Result<PatchSidecar> {
        let path = dir.join(&record.sidecar_file);
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DsrError::MissingArtifact(format!("patch sidecar {}", path.display()))
            } else {
                DsrError::Io(e)
            }
        })?;
        serde_json::from_str(&text)
            .map_err(|e| DsrError::Format(format!("{}: {e}", path.display())))
    }

    /// Loads one input/target pair at the requested float width.
    pub fn load_pair<T: Real>(&self, dir: &Path, record: &PatchRecord) -> Result<PatchPair<T>> {
        let side = self.load_sidecar(dir, record)?;
        let grid = CentroidGrid::new(side.bbox, side.big_t);
        let input = read_tensor::<T>(&dir.join(&record.input_file))?;
        let target = read_tensor::<T>(&dir.join(&record.target_file))?;
        Ok(PatchPair {
            input: super::voxel::VelocityTensor::new(grid.clone(), input)?,
            target: super::voxel::VelocityTensor::new(grid, target)?,
            level: record.level,
            patch_id: record.patch_id,
        })
    }

    /// Loads every pair of a split, in manifest order.
    pub fn load_pairs<T: Real>(&self, dir: &Path, split: Split) -> Result<Vec<PatchPair<T>>> {
        self.records_for(split)
            .into_iter()
            .map(|r| self.load_pair(dir, r))
            .collect()
    }
}

/// Shuffles `0..count` with the seed and splits off the first
/// `held_out` indices (at least one on each side).
fn split_indices(count: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 2 {
        return Err(DsrError::Config(format!(
            "need at least 2 patches to split, got {count}; reduce the patch spacing or enlarge the geometry"
        )));
    }
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut rng);
    let held = ((count as f64 * fraction).round() as usize).clamp(1, count - 1);
    let (held_out, kept) = idx.split_at(held);
    Ok((held_out.to_vec(), kept.to_vec()))
}

/// Voxelizes one patch of `cloud` at its native resolution (capped at
/// `big_t`) and resizes to the common resolution.
fn voxelize_patch<T: Real>(
    patch: &NeighborhoodPatch,
    grid_t: usize,
    cloud: &VelocityPointCloud,
    base_grid: &CentroidGrid,
    big_t: usize,
) -> Result<super::voxel::VelocityTensor<T>> {
    let grid = CentroidGrid::new(*base_grid.bbox(), grid_t);
    let native = assign_velocities::<T>(patch, &grid, cloud)?;
    resize_nearest(&native, big_t)
}

fn write_pair_files<T: Real>(
    dir: &Path,
    sidecar: &PatchSidecar,
    input: &super::voxel::VelocityTensor<T>,
    target: &super::voxel::VelocityTensor<T>,
) -> Result<PatchRecord> {
    let stem = format!("patches/p{:04}_l{}", sidecar.patch_id, sidecar.level);
    let input_file = format!("{stem}_in.dsrt");
    let target_file = format!("{stem}_tgt.dsrt");
    let sidecar_file = format!("{stem}.json");
    write_tensor(&dir.join(&input_file), input.values())?;
    write_tensor(&dir.join(&target_file), target.values())?;
    fs::write(
        dir.join(&sidecar_file),
        serde_json::to_string_pretty(sidecar)?,
    )?;
    Ok(PatchRecord {
        patch_id: sidecar.patch_id,
        level: sidecar.level,
        split: sidecar.split,
        input_file,
        target_file,
        sidecar_file,
    })
}

/// Generates the synthetic clouds, partitions both geometries into
/// patches, voxelizes everything, and writes the complete dataset
/// (clouds, tensors, sidecars, manifest) into `dir`.
///
/// Pretraining pairs coarsen the clean field of the pretrain geometry
/// through the resolution pyramid; fine-tune/test pairs pair a
/// coarser voxelization of the degraded transfer field with the clean
/// one, so adapting to them requires bridging a genuine domain shift.
pub fn build_dataset(config: &DatasetBuildConfig, dir: &Path) -> Result<DatasetManifest> {
    config.validate()?;
    fs::create_dir_all(dir.join("patches"))?;
    let seed = config.seed;

    let pretrain_cloud = synth_flow(
        &config.pretrain_geometry,
        config.spacing,
        config.u_max,
        mix_seed(seed, 1),
    )?;
    let transfer_clean = synth_flow(
        &config.transfer_geometry,
        config.spacing,
        config.u_max,
        mix_seed(seed, 2),
    )?;
    let transfer_degraded = degrade_to_4df(
        &transfer_clean,
        config.sigma_v,
        &config.bias,
        mix_seed(seed, 3),
    )?;

    let epsilon = match config.epsilon {
        Some(eps) => eps,
        None => calibrate_epsilon(
            &pretrain_cloud,
            1usize << (3 * config.big_t),
            48,
            mix_seed(seed, 4),
        )?,
    };
    let spacing = config.patch_spacing_factor * epsilon;
    let pre_patches = partition_geometry(&pretrain_cloud, epsilon, spacing, mix_seed(seed, 5))?;
    let tr_patches = partition_geometry(&transfer_clean, epsilon, spacing, mix_seed(seed, 6))?;

    let (val_idx, _) = split_indices(
        pre_patches.len(),
        config.validation_fraction,
        mix_seed(seed, 7),
    )?;
    let (ft_idx, _) = split_indices(
        tr_patches.len(),
        config.finetune_fraction,
        mix_seed(seed, 8),
    )?;
    let val_set: std::collections::HashSet<usize> = val_idx.into_iter().collect();
    let ft_set: std::collections::HashSet<usize> = ft_idx.into_iter().collect();

    let mut records = Vec::new();

    // pretraining pairs: pyramid over the clean field
    for (k, patch) in pre_patches.iter().enumerate() {
        let split = if val_set.contains(&k) {
            Split::Validation
        } else {
            Split::Pretrain
        };
        let base_grid = make_grid(patch, &pretrain_cloud)?;
        let t_used = patch.t().min(config.big_t);
        let target =
            voxelize_patch::<f64>(patch, t_used, &pretrain_cloud, &base_grid, config.big_t)?;
        let pairs = downsample_pyramid(&target, config.levels, k)?;
        for pair in &pairs {
            let sidecar = PatchSidecar {
                patch_id: k,
                center_index: patch.center(),
                center: pretrain_cloud.point(patch.center()),
                epsilon,
                member_count: patch.len(),
                t: t_used,
                big_t: config.big_t,
                level: pair.level,
                split,
                bbox: *base_grid.bbox(),
            };
            records.push(write_pair_files(dir, &sidecar, &pair.input, &pair.target)?);
        }
    }

    // transfer pairs: degraded coarse input vs clean target
    for (k, patch) in tr_patches.iter().enumerate() {
        let patch_id = pre_patches.len() + k;
        let split = if ft_set.contains(&k) {
            Split::Finetune
        } else {
            Split::Test
        };
        let base_grid = make_grid(patch, &transfer_clean)?;
        let t_used = patch.t().min(config.big_t);
        let t_in = t_used.saturating_sub(config.coarsen);
        let target =
            voxelize_patch::<f64>(patch, t_used, &transfer_clean, &base_grid, config.big_t)?;
        let input =
            voxelize_patch::<f64>(patch, t_in, &transfer_degraded, &base_grid, config.big_t)?;
        let sidecar = PatchSidecar {
            patch_id,
            center_index: patch.center(),
            center: transfer_clean.point(patch.center()),
            epsilon,
            member_count: patch.len(),
            t: t_used,
            big_t: config.big_t,
            level: t_used - t_in,
            split,
            bbox: *base_grid.bbox(),
        };
        records.push(write_pair_files(dir, &sidecar, &input, &target)?);
    }

    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        config: config.clone(),
        epsilon,
        pretrain_patches: pre_patches.len(),
        transfer_patches: tr_patches.len(),
        pretrain_cloud: "pretrain_cloud.csv".into(),
        transfer_clean_cloud: "transfer_clean_cloud.csv".into(),
        transfer_degraded_cloud: "transfer_degraded_cloud.csv".into(),
        records,
    };
    pretrain_cloud.write_csv(&dir.join(&manifest.pretrain_cloud))?;
    transfer_clean.write_csv(&dir.join(&manifest.transfer_clean_cloud))?;
    transfer_degraded.write_csv(&dir.join(&manifest.transfer_degraded_cloud))?;
    manifest.validate()?;
    manifest.save(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> DatasetBuildConfig {
        DatasetBuildConfig {
            pretrain_geometry: FlowGeometry::StraightTube {
                radius: 1.0,
                length: 6.0,
            },
            transfer_geometry: FlowGeometry::TorusSegment {
                tube_radius: 1.0,
                bend_radius: 3.0,
                angle: std::f64::consts::PI / 2.0,
            },
            spacing: 0.4,
            u_max: 1.0,
            big_t: 2,
            levels: 2,
            epsilon: None,
            patch_spacing_factor: 1.0,
            coarsen: 1,
            sigma_v: 0.05,
            bias: BiasField::default(),
            validation_fraction: 0.34,
            finetune_fraction: 0.34,
            seed: 11,
        }
    }

    #[test]
    fn builds_a_complete_dataset_and_round_trips_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&tiny_config(), dir.path()).unwrap();
        assert!(manifest.pretrain_patches >= 2);
        assert!(manifest.transfer_patches >= 2);

        let loaded = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(
            serde_json::to_value(&manifest).unwrap(),
            serde_json::to_value(&loaded).unwrap()
        );

        // every split is populated and pretrain patches have `levels` pairs
        for split in [Split::Pretrain, Split::Validation, Split::Finetune, Split::Test] {
            assert!(!manifest.records_for(split).is_empty(), "{split:?}");
        }
        let pre_records: Vec<_> = manifest
            .records
            .iter()
            .filter(|r| r.patch_id < manifest.pretrain_patches)
            .collect();
        assert_eq!(
            pre_records.len(),
            manifest.pretrain_patches * manifest.config.levels
        );

        // tensors load at the common resolution, with finite values
        let pairs = loaded.load_pairs::<f32>(dir.path(), Split::Test).unwrap();
        assert!(!pairs.is_empty());
        for pair in &pairs {
            assert_eq!(pair.input.values().shape(), [3, 4, 4, 4]);
            assert_eq!(pair.target.values().shape(), [3, 4, 4, 4]);
            assert!(pair.input.values().all_finite());
            assert!(pair.target.values().all_finite());
        }

        // sidecars are consistent with their records
        for record in &manifest.records {
            let side = manifest.load_sidecar(dir.path(), record).unwrap();
            assert_eq!(side.patch_id, record.patch_id);
            assert_eq!(side.level, record.level);
            assert_eq!(side.split, record.split);
            assert!(side.bbox.contains(side.center, 1e-9));
            assert!(side.t <= side.big_t);
        }

        // the clouds round-trip
        let cloud = VelocityPointCloud::read_csv(&dir.path().join(&manifest.pretrain_cloud));
        assert!(cloud.unwrap().len() > 100);
    }

    #[test]
    fn rebuild_with_the_same_seed_is_identical() {
        let da = tempfile::tempdir().unwrap();
        let db = tempfile::tempdir().unwrap();
        let ma = build_dataset(&tiny_config(), da.path()).unwrap();
        let mb = build_dataset(&tiny_config(), db.path()).unwrap();
        assert_eq!(
            serde_json::to_value(&ma).unwrap(),
            serde_json::to_value(&mb).unwrap()
        );
        let ra = &ma.records[0];
        let bytes_a = std::fs::read(da.path().join(&ra.input_file)).unwrap();
        let bytes_b = std::fs::read(db.path().join(&ra.input_file)).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn transfer_inputs_differ_from_targets() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = build_dataset(&tiny_config(), dir.path()).unwrap();
        let pairs = manifest
            .load_pairs::<f64>(dir.path(), Split::Finetune)
            .unwrap();
        for pair in &pairs {
            assert!(pair.level >= 1);
            let same = pair
                .input
                .values()
                .data()
                .iter()
                .zip(pair.target.values().data())
                .all(|(a, b)| a == b);
            assert!(!same, "degraded input should not equal the clean target");
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut c = tiny_config();
        c.levels = 3; // exceeds big_t = 2
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.coarsen = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.validation_fraction = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.big_t = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn manifest_validation_catches_duplicates_and_missing_splits() {
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = build_dataset(&tiny_config(), dir.path()).unwrap();
        let dup = manifest.records[0].clone();
        manifest.records.push(dup);
        assert!(matches!(
            manifest.validate().unwrap_err(),
            DsrError::Format(_)
        ));
        let mut manifest = DatasetManifest::load(dir.path()).unwrap();
        manifest.records.retain(|r| r.split != Split::Test);
        assert!(manifest.validate().is_err());
    }
}
