//! `dsr` — command-line driver for the distributional super-resolution
//! pipeline: synthetic dataset generation, pre-training, fine-tuning,
//! Monte-Carlo prediction, evaluation, the extrapolation studies, and
//! the gradient-fidelity check.
//!
//! Every command reads an optional strict-JSON config (unknown keys are
//! errors), honors the `DSR_SEED` environment variable over the config
//! seed (and an explicit `--seed` flag over both), and echoes its
//! fully-resolved settings to `resolved-config.json` in the output
//! directory. Exit codes: 0 success, 2 configuration/input error,
//! 3 numeric error, 4 missing artifact; failures also print a
//! machine-readable JSON object on stderr.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dsr_core::DsrError;

#[derive(Parser)]
#[command(name = "dsr", version, about = "Distributional super-resolution pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic flow clouds and the voxelized patch dataset.
    Synth(SynthArgs),
    /// Train the volumetric network on the pretraining pyramid pairs.
    Pretrain(IoArgs),
    /// Adapt a pretrained checkpoint to the measurement pairs.
    Finetune(CheckpointArgs),
    /// Monte-Carlo upsample the test patches and rebuild the geometry.
    Predict(PredictArgs),
    /// Compare a prediction cloud against a reference cloud.
    Evaluate(EvaluateArgs),
    /// Run the synthetic extrapolation study (distributional vs L2).
    Simulate(SimulateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the dataset.
    #[arg(long)]
    out: PathBuf,
    /// Override the generation seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IoArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CheckpointArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint directory written by `pretrain` (or `finetune`).
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads for independent patches.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prediction cloud CSV.
    #[arg(long)]
    prediction: PathBuf,
    /// Reference cloud CSV.
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Link function: softplus, square, log or cubic.
    #[arg(long, conflicts_with = "sweep")]
    g: Option<String>,
    /// Covariate dimension (3 or 64).
    #[arg(long, conflicts_with = "sweep")]
    dim: Option<usize>,
    /// Number of independent runs.
    #[arg(long)]
    runs: Option<usize>,
    /// Override the study seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run every link function at both dimensions.
    #[arg(long)]
    sweep: bool,
    /// Worker threads for independent study settings.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Probe seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Optional directory for the JSON report.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            let (code, kind) = classify(&e);
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": e.to_string(), "exit_code": code }
            });
            eprintln!("{payload}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> dsr_core::Result<ExitCode> {
    match cli.command {
        Command::Synth(a) => {
            commands::synth(a.config.as_deref(), &a.out, a.seed)?;
        }
        Command::Pretrain(a) => {
            commands::cmd_pretrain(a.config.as_deref(), &a.data, &a.out)?;
        }
        Command::Finetune(a) => {
            commands::cmd_finetune(a.config.as_deref(), &a.data, &a.checkpoint, &a.out)?;
        }
        Command::Predict(a) => {
            commands::cmd_predict(a.config.as_deref(), &a.data, &a.checkpoint, &a.out, a.parallel)?;
        }
        Command::Evaluate(a) => {
            commands::cmd_evaluate(&a.prediction, &a.reference, &a.out)?;
        }
        Command::Simulate(a) => {
            let flags = commands::SimFlags {
                g: a.g,
                dim: a.dim,
                runs: a.runs,
                seed: a.seed,
                sweep: a.sweep,
            };
            commands::cmd_simulate(a.config.as_deref(), &a.out, flags, a.parallel)?;
        }
        Command::Gradcheck(a) => {
            let all_passed = commands::cmd_gradcheck(a.seed, a.out.as_deref())?;
            if !all_passed {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Maps an error onto (exit code, machine-readable kind).
fn classify(e: &DsrError) -> (u8, &'static str) {
    match e {
        DsrError::Config(_) => (2, "config"),
        DsrError::Dimension(_) => (2, "dimension"),
        DsrError::Usage(_) => (2, "usage"),
        DsrError::Format(_) => (2, "format"),
        DsrError::Io(_) => (2, "io"),
        DsrError::Json(_) => (2, "json"),
        DsrError::Numeric(_) => (3, "numeric"),
        DsrError::Coverage { .. } => (3, "coverage"),
        DsrError::MissingArtifact(_) => (4, "missing_artifact"),
    }
}
