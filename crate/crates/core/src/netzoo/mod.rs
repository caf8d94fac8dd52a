//! Model definitions: a projection-first MLP for the 1-D-output studies and a
//! 3-D U-Net for volumetric super-resolution, plus the parameter container
//! they share (initialization, freeze masks, head replacement, checkpoints).

mod mlp;
mod unet;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use mlp::MlpSpec;
pub use unet::UNet3dSpec;

use crate::diffcore::{io, Graph, NodeId, Tensor};
use crate::{DsrError, Real, Result};

/// Name of the output layer's parameters in every architecture; this is the
/// layer that linear probing retrains from scratch.
pub const HEAD_WEIGHT: &str = "head.w";
pub const HEAD_BIAS: &str = "head.b";

/// Architecture description, stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchSpec {
    Mlp(MlpSpec),
    Unet3d(UNet3dSpec),
}

/// One named parameter tensor and its freeze state.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Real> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// A model's parameters in a fixed order, with everything needed to rebuild
/// the forward pass: the architecture, the init seed, and per-tensor freeze
/// flags.
#[derive(Debug, Clone)]
pub struct ModelParams<T: Real> {
    arch: ArchSpec,
    seed: u64,
    entries: Vec<ParamEntry<T>>,
}

/// Layout blueprint produced by the architecture modules: (name, shape,
/// fan-in) per tensor, in graph order.
pub(crate) struct LayerPlan {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

impl<T: Real> ModelParams<T> {
    /// Builds whichever architecture `arch` describes.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Self> {
        match arch {
            ArchSpec::Mlp(spec) => Self::build_mlp(spec.clone(), seed),
            ArchSpec::Unet3d(spec) => Self::build_unet3d(spec.clone(), seed),
        }
    }

    /// Builds an MLP `input_dim -> 1 -> hidden... -> 1`; the first map is a
    /// pure linear projection (no bias, no activation) whose weights act as
    /// the input-combination coefficients.
    pub fn build_mlp(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self::from_plan(ArchSpec::Mlp(spec.clone()), spec.layer_plan(), seed))
    }

    /// Builds a 3-D U-Net over `[3, s, s, s]` volumes with `depth` poolings
    /// and channel doubling; the head is a 1x1x1 convolution and the whole
    /// network is residual (it predicts a correction to its input).
    pub fn build_unet3d(spec: UNet3dSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self::from_plan(ArchSpec::Unet3d(spec.clone()), spec.layer_plan(), seed))
    }

    fn from_plan(arch: ArchSpec, plan: Vec<LayerPlan>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = plan
            .into_iter()
            .map(|layer| {
                let tensor = init_uniform(&layer.shape, layer.fan_in, &mut rng);
                ParamEntry {
                    name: layer.name,
                    tensor,
                    trainable: true,
                }
            })
            .collect();
        ModelParams { arch, seed, entries }
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut ParamEntry<T> {
        &mut self.entries[index]
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_mask(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.trainable).collect()
    }

    pub fn set_all_trainable(&mut self) {
        for e in &mut self.entries {
            e.trainable = true;
        }
    }

    /// Freezes everything except the head (linear-probe phase).
    pub fn freeze_all_but_head(&mut self) {
        for e in &mut self.entries {
            e.trainable = e.name == HEAD_WEIGHT || e.name == HEAD_BIAS;
        }
    }

    /// Fresh copy with the head re-initialized from `seed` and frozen
    /// everything else; all non-head tensors are bit-identical clones.
    pub fn replace_head(&self, seed: u64) -> Self {
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in &mut out.entries {
            if e.name == HEAD_WEIGHT || e.name == HEAD_BIAS {
                let fan_in = head_fan_in(&self.arch);
                e.tensor = init_uniform(e.tensor.shape(), fan_in, &mut rng);
                e.trainable = true;
            } else {
                e.trainable = false;
            }
        }
        out.seed = seed;
        out
    }

    /// Inserts every parameter into `g` — trainable ones as tracked leaves,
    /// frozen ones as constants so backward stops at them.
    pub fn insert_into_graph(&self, g: &mut Graph<T>) -> Vec<NodeId> {
        self.entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(e.tensor.clone())
                } else {
                    g.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    /// Wires the forward pass from `input` through parameters previously
    /// inserted by [`ModelParams::insert_into_graph`].
    pub fn forward(&self, g: &mut Graph<T>, param_ids: &[NodeId], input: NodeId) -> Result<NodeId> {
        if param_ids.len() != self.entries.len() {
            return Err(DsrError::Usage(format!(
                "forward: {} parameter nodes for {} parameters",
                param_ids.len(),
                self.entries.len()
            )));
        }
        match &self.arch {
            ArchSpec::Mlp(spec) => mlp::forward(spec, g, param_ids, input),
            ArchSpec::Unet3d(spec) => unet::forward(spec, g, param_ids, input),
        }
    }

    /// Convenience single forward on a fresh private graph (no gradients).
    pub fn forward_value(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let input_id = g.constant(input.clone());
        let frozen: Vec<NodeId> = self.entries.iter().map(|e| g.constant(e.tensor.clone())).collect();
        let out = self.forward(&mut g, &frozen, input_id)?;
        Ok(g.value(out).clone())
    }

    /// Input-combination coefficients of the MLP's projection layer,
    /// normalized so the first coefficient is 1.
    pub fn extract_beta(&self) -> Result<Vec<f64>> {
        let ArchSpec::Mlp(_) = &self.arch else {
            return Err(DsrError::Usage("extract_beta is only defined for the MLP".into()));
        };
        let w = &self.entries[0];
        debug_assert_eq!(w.name, "projection.w");
        let first = w.tensor.data()[0].to_f64();
        if first.abs() < 1e-12 {
            return Err(DsrError::Numeric(format!(
                "extract_beta: first projection coefficient {first:e} is too close to zero to normalize"
            )));
        }
        Ok(w.tensor.data().iter().map(|&v| v.to_f64() / first).collect())
    }

    // -- checkpoints -------------------------------------------------------------

    /// Writes `manifest.json` plus one tensor file per parameter into `dir`
    /// (created if missing).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut params = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("{i:03}_{}.dsrt", e.name);
            io::write_tensor(&dir.join(&file), &e.tensor)?;
            params.push(CheckpointParam {
                name: e.name.clone(),
                trainable: e.trainable,
                file,
            });
        }
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            version: 1,
            arch: self.arch.clone(),
            seed: self.seed,
            params,
        };
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    /// Loads a checkpoint saved by [`ModelParams::save`], verifying that the
    /// stored tensors match the architecture's layout.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DsrError::MissingArtifact(format!("checkpoint manifest {}", manifest_path.display()))
            } else {
                DsrError::Io(e)
            }
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| DsrError::Format(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
            return Err(DsrError::Format(format!(
                "{}: unsupported checkpoint format {}/{}",
                manifest_path.display(),
                manifest.format,
                manifest.version
            )));
        }
        let plan = match &manifest.arch {
            ArchSpec::Mlp(spec) => {
                spec.validate()?;
                spec.layer_plan()
            }
            ArchSpec::Unet3d(spec) => {
                spec.validate()?;
                spec.layer_plan()
            }
        };
        if plan.len() != manifest.params.len() {
            return Err(DsrError::Format(format!(
                "checkpoint has {} tensors, architecture expects {}",
                manifest.params.len(),
                plan.len()
            )));
        }
        let mut entries = Vec::with_capacity(plan.len());
        for (expect, stored) in plan.iter().zip(&manifest.params) {
            if expect.name != stored.name {
                return Err(DsrError::Format(format!(
                    "checkpoint tensor '{}' where architecture expects '{}'",
                    stored.name, expect.name
                )));
            }
            let tensor: Tensor<T> = io::read_tensor(&dir.join(&stored.file))?;
            if tensor.shape() != expect.shape.as_slice() {
                return Err(DsrError::Format(format!(
                    "checkpoint tensor '{}' has shape {:?}, architecture expects {:?}",
                    stored.name,
                    tensor.shape(),
                    expect.shape
                )));
            }
            entries.push(ParamEntry {
                name: stored.name.clone(),
                tensor,
                trainable: stored.trainable,
            });
        }
        Ok(ModelParams {
            arch: manifest.arch,
            seed: manifest.seed,
            entries,
        })
    }
}

const CHECKPOINT_FORMAT: &str = "dsr-checkpoint";

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    version: u32,
    arch: ArchSpec,
    seed: u64,
    params: Vec<CheckpointParam>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointParam {
    name: String,
    trainable: bool,
    file: String,
}

/// Uniform init on +/- sqrt(1 / fan_in), drawn in entry order.
fn init_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = T::from_f64((1.0 / fan_in.max(1) as f64).sqrt());
    let two = T::from_f64(2.0);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let u = T::unit_uniform(rng);
        *v = bound * (two * u - T::one());
    }
    t
}

fn head_fan_in(arch: &ArchSpec) -> usize {
    match arch {
        ArchSpec::Mlp(spec) => spec.head_fan_in(),
        ArchSpec::Unet3d(spec) => spec.head_fan_in(),
    }
}
