//! The single JSON configuration document shared by every subcommand.
//!
//! Each section mirrors a core config type and is optional: a command
//! reads only the sections it needs and falls back to the documented
//! defaults for the rest. Unknown keys anywhere in the document are
//! rejected so a typo cannot silently fall back to a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dsr_core::geomdata::DatasetBuildConfig;
use dsr_core::netzoo::ArchSpec;
use dsr_core::predictor::PredictSpec;
use dsr_core::simlab::SimConfig;
use dsr_core::trainer::{FinetuneConfig, TrainConfig};
use dsr_core::{DsrError, Result};

/// Top-level configuration document.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// Synthetic dataset generation (`synth`).
    pub data: DatasetBuildConfig,
    /// Network architecture for `pretrain`; the volumetric default is
    /// used when absent.
    pub model: Option<ArchSpec>,
    /// Training hyper-parameters for `pretrain`.
    pub train: TrainConfig,
    /// Two-phase adaptation schedule for `finetune` (carries its own
    /// base training section).
    pub finetune: FinetuneConfig,
    /// Monte-Carlo prediction settings for `predict`.
    pub predict: PredictSpec,
    /// Synthetic extrapolation study settings for `simulate`.
    pub sim: SimConfig,
    /// When set, overrides the seed of whichever section the command
    /// uses. The `DSR_SEED` environment variable overrides this value,
    /// and an explicit `--seed` flag overrides both.
    pub seed: Option<u64>,
}

impl CliConfig {
    /// Loads the document from `path`, or returns the defaults when no
    /// path was given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                DsrError::MissingArtifact(format!("config file {}", path.display()))
            } else {
                DsrError::Io(e)
            }
        })?;
        serde_json::from_str(&text)
            .map_err(|e| DsrError::Config(format!("{}: {e}", path.display())))
    }

    /// Seed that overrides section seeds, if any: `--seed` flag, then
    /// `DSR_SEED`, then the document's top-level `seed`.
    pub fn seed_override(&self, flag: Option<u64>) -> Result<Option<u64>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match std::env::var("DSR_SEED") {
            Ok(raw) => {
                let parsed = raw.parse::<u64>().map_err(|_| {
                    DsrError::Config(format!(
                        "DSR_SEED must be an unsigned integer, got '{raw}'"
                    ))
                })?;
                Ok(Some(parsed))
            }
            Err(std::env::VarError::NotPresent) => Ok(self.seed),
            Err(std::env::VarError::NotUnicode(_)) => Err(DsrError::Config(
                "DSR_SEED contains invalid unicode".into(),
            )),
        }
    }
}

/// Writes `resolved-config.json` into `out`, creating the directory.
/// Every command calls this with its fully-resolved settings so the
/// run is reproducible from the output directory alone.
pub fn write_resolved<S: Serialize>(out: &Path, resolved: &S) -> Result<()> {
    fs::create_dir_all(out)?;
    let text = serde_json::to_string_pretty(resolved)?;
    fs::write(out.join("resolved-config.json"), text)?;
    Ok(())
}
