//! Implementations of the subcommands. Each one resolves its
//! configuration (file, then `DSR_SEED`, then flags), echoes the
//! resolved settings into the output directory, runs the wrapped
//! library operation, and writes plot-ready CSV plus JSON reports.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use dsr_core::geomdata::{
    build_dataset, DatasetManifest, PatchPair, PatchSidecar, Split, VelocityPointCloud,
};
use dsr_core::netzoo::{ArchSpec, ModelParams, UNet3dSpec};
use dsr_core::predictor::{
    evaluate_velocities, mc_upsample, reconstruct_shape, PredictSpec, PredictedPatch,
};
use dsr_core::simlab::{run_comparison, GName, RunReport, SimConfig};
use dsr_core::trainer::{finetune_lpft, pretrain, TrainReport};
use dsr_core::verify::{gradcheck_composites, CompositeOutcome};
use dsr_core::{mix_seed, DsrError, Result};

use crate::config::{write_resolved, CliConfig};

const CHECKPOINT_DIR: &str = "checkpoint";

/// Generates the synthetic clouds and the voxelized patch dataset.
pub fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    let mut data = cfg.data.clone();
    if let Some(s) = cfg.seed_override(seed)? {
        data.seed = s;
    }
    data.validate()?;
    write_resolved(out, &json!({ "command": "synth", "out": out, "data": data }))?;

    let manifest = build_dataset(&data, out)?;
    let count = |split: Split| manifest.records_for(split).len();
    println!(
        "wrote {} patch records ({} pretrain, {} validation, {} finetune, {} test) to {}",
        manifest.records.len(),
        count(Split::Pretrain),
        count(Split::Validation),
        count(Split::Finetune),
        count(Split::Test),
        out.display()
    );
    Ok(())
}

fn save_trained(
    out: &Path,
    model: &ModelParams<f32>,
    mut report: TrainReport,
) -> Result<()> {
    model.save(&out.join(CHECKPOINT_DIR))?;
    report.checkpoint = Some(CHECKPOINT_DIR.into());
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out.join("train-report.json"), text)?;
    Ok(())
}

/// Trains the volumetric network on the pretraining pyramid pairs.
pub fn cmd_pretrain(config: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    let mut train = cfg.train.clone();
    if let Some(s) = cfg.seed_override(None)? {
        train.seed = s;
    }
    let arch = cfg
        .model
        .clone()
        .unwrap_or_else(|| ArchSpec::Unet3d(UNet3dSpec::default()));
    write_resolved(
        out,
        &json!({
            "command": "pretrain",
            "data": data,
            "out": out,
            "model": arch,
            "train": train,
        }),
    )?;

    let manifest = DatasetManifest::load(data)?;
    let train_pairs: Vec<PatchPair<f32>> = manifest.load_pairs(data, Split::Pretrain)?;
    let val_pairs: Vec<PatchPair<f32>> = manifest.load_pairs(data, Split::Validation)?;
    let model = ModelParams::<f32>::build(&arch, train.seed)?;
    let (model, report) = pretrain(model, &train_pairs, &val_pairs, &train)?;
    save_trained(out, &model, report.clone())?;
    println!(
        "pretrained on {} pairs ({} validation) for {} epochs; final train loss {:.6}; checkpoint at {}",
        train_pairs.len(),
        val_pairs.len(),
        report.epochs(),
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

/// Adapts a pretrained checkpoint to the measurement pairs with the
/// probe-then-full schedule.
pub fn cmd_finetune(
    config: Option<&Path>,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<()> {
    let cfg = CliConfig::load(config)?;
    let mut finetune = cfg.finetune.clone();
    if let Some(s) = cfg.seed_override(None)? {
        finetune.base.seed = s;
    }
    write_resolved(
        out,
        &json!({
            "command": "finetune",
            "data": data,
            "checkpoint": checkpoint,
            "out": out,
            "finetune": finetune,
        }),
    )?;

    let manifest = DatasetManifest::load(data)?;
    let pairs: Vec<PatchPair<f32>> = manifest.load_pairs(data, Split::Finetune)?;
    let pretrained = ModelParams::<f32>::load(checkpoint)?;
    let (model, report) = finetune_lpft(&pretrained, &pairs, &finetune)?;
    save_trained(out, &model, report.clone())?;
    println!(
        "fine-tuned on {} pairs (phases {:?}); final train loss {:.6}; checkpoint at {}",
        pairs.len(),
        report.phase_epochs,
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        out.join(CHECKPOINT_DIR).display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PredictReport {
    patches: usize,
    points: usize,
    samples: usize,
    sigma2: f64,
    seed: u64,
    min_patches_per_point: usize,
    max_patches_per_point: usize,
}

/// Runs Monte-Carlo upsampling over every test patch and maps the
/// predictions back onto the clean geometry's points.
pub fn cmd_predict(
    config: Option<&Path>,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    parallel: usize,
) -> Result<()> {
    if parallel == 0 {
        return Err(DsrError::Config("--parallel must be at least 1".into()));
    }
    let cfg = CliConfig::load(config)?;
    let mut spec = cfg.predict.clone();
    if let Some(s) = cfg.seed_override(None)? {
        spec.seed = s;
    }
    spec.validate()?;
    write_resolved(
        out,
        &json!({
            "command": "predict",
            "data": data,
            "checkpoint": checkpoint,
            "out": out,
            "predict": spec,
            "parallel": parallel,
        }),
    )?;

    let manifest = DatasetManifest::load(data)?;
    let model = ModelParams::<f32>::load(checkpoint)?;
    // the reconstruction must cover the whole transfer geometry, so
    // every measurement patch is predicted (fine-tune and test alike);
    // held-out error metrics come from `evaluate` and the study suites
    let mut inputs: Vec<(PatchPair<f32>, PatchSidecar)> = Vec::new();
    for split in [Split::Finetune, Split::Test] {
        for record in manifest.records_for(split) {
            inputs.push((
                manifest.load_pair(data, record)?,
                manifest.load_sidecar(data, record)?,
            ));
        }
    }
    if inputs.is_empty() {
        return Err(DsrError::MissingArtifact(format!(
            "no measurement patches in dataset {}",
            data.display()
        )));
    }

    let patches = predict_patches(&model, &inputs, &spec, parallel)?;
    let reference = VelocityPointCloud::read_csv(&data.join(&manifest.transfer_clean_cloud))?;
    let field = reconstruct_shape(&patches, reference.points())?;
    field
        .to_cloud(reference.points().to_vec())?
        .write_csv(&out.join("prediction.csv"))?;

    let report = PredictReport {
        patches: patches.len(),
        points: field.len(),
        samples: spec.samples,
        sigma2: spec.sigma2,
        seed: spec.seed,
        min_patches_per_point: field.patch_counts().iter().copied().min().unwrap_or(0),
        max_patches_per_point: field.patch_counts().iter().copied().max().unwrap_or(0),
    };
    std::fs::write(
        out.join("predict-report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "predicted {} patches onto {} points (coverage {}..{} patches per point); wrote {}",
        report.patches,
        report.points,
        report.min_patches_per_point,
        report.max_patches_per_point,
        out.join("prediction.csv").display()
    );
    Ok(())
}

/// Monte-Carlo upsampling of every patch, optionally spread over
/// worker threads. Per-patch seeds depend only on the patch id, so the
/// result is identical for any worker count.
fn predict_patches(
    model: &ModelParams<f32>,
    inputs: &[(PatchPair<f32>, PatchSidecar)],
    spec: &PredictSpec,
    parallel: usize,
) -> Result<Vec<PredictedPatch<f32>>> {
    let workers = parallel.min(inputs.len()).max(1);
    let run_one = |(pair, side): &(PatchPair<f32>, PatchSidecar)| -> Result<PredictedPatch<f32>> {
        let per_patch = PredictSpec {
            seed: mix_seed(spec.seed, pair.patch_id as u64),
            ..*spec
        };
        Ok(PredictedPatch {
            tensor: mc_upsample(model, &pair.input, &per_patch)?,
            center: side.center,
            epsilon: side.epsilon,
        })
    };

    let mut slots: Vec<Option<PredictedPatch<f32>>> = Vec::new();
    slots.resize_with(inputs.len(), || None);
    if workers == 1 {
        for (i, input) in inputs.iter().enumerate() {
            slots[i] = Some(run_one(input)?);
        }
    } else {
        let results: Vec<Result<Vec<(usize, PredictedPatch<f32>)>>> =
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let run_one = &run_one;
                        scope.spawn(move || {
                            inputs
                                .iter()
                                .enumerate()
                                .skip(w)
                                .step_by(workers)
                                .map(|(i, input)| Ok((i, run_one(input)?)))
                                .collect()
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("prediction worker panicked"))
                    .collect()
            });
        for worker_result in results {
            for (i, patch) in worker_result? {
                slots[i] = Some(patch);
            }
        }
    }
    Ok(slots
        .into_iter()
        .map(|s| s.expect("every index assigned exactly once"))
        .collect())
}

/// Compares a prediction cloud against a reference cloud point by
/// point and writes the MSE metrics.
pub fn cmd_evaluate(prediction: &Path, reference: &Path, out: &Path) -> Result<()> {
    write_resolved(
        out,
        &json!({
            "command": "evaluate",
            "prediction": prediction,
            "reference": reference,
            "out": out,
        }),
    )?;
    let pred = VelocityPointCloud::read_csv(prediction)?;
    let truth = VelocityPointCloud::read_csv(reference)?;
    if pred.len() != truth.len() {
        return Err(DsrError::Dimension(format!(
            "prediction has {} points, reference has {}",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(i) = (0..pred.len()).find(|&i| pred.point(i) != truth.point(i)) {
        return Err(DsrError::Usage(format!(
            "prediction and reference disagree on point {i}: {:?} vs {:?}",
            pred.point(i),
            truth.point(i)
        )));
    }
    let metrics = evaluate_velocities(pred.velocities(), truth.velocities())?;
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&metrics)?,
    )?;
    println!(
        "evaluated {} points: mse_overall {:.6e} (x {:.6e}, y {:.6e}, z {:.6e}, magnitude {:.6e})",
        pred.len(),
        metrics.mse_overall,
        metrics.mse_x,
        metrics.mse_y,
        metrics.mse_z,
        metrics.mse_magnitude
    );
    Ok(())
}

/// Flag overrides for `simulate`.
pub struct SimFlags {
    pub g: Option<String>,
    pub dim: Option<usize>,
    pub runs: Option<usize>,
    pub seed: Option<u64>,
    pub sweep: bool,
}

#[derive(Serialize)]
struct SimSummary<'a> {
    median_mse: dsr_core::simlab::MedianMse,
    report: &'a RunReport,
}

/// Runs the extrapolation study for one setting, or for every link
/// function and dimension when `--sweep` is given.
pub fn cmd_simulate(
    config: Option<&Path>,
    out: &Path,
    flags: SimFlags,
    parallel: usize,
) -> Result<()> {
    if parallel == 0 {
        return Err(DsrError::Config("--parallel must be at least 1".into()));
    }
    let cfg = CliConfig::load(config)?;
    let mut base = cfg.sim.clone();
    if let Some(g) = &flags.g {
        base.g_name = g.parse::<GName>()?;
    }
    if let Some(d) = flags.dim {
        base.dim = d;
    }
    if let Some(r) = flags.runs {
        base.runs = r;
    }
    if let Some(s) = cfg.seed_override(flags.seed)? {
        base.seed = s;
    }

    let combos: Vec<SimConfig> = if flags.sweep {
        GName::ALL
            .iter()
            .flat_map(|&g| {
                [3usize, 64].into_iter().map(move |dim| (g, dim))
            })
            .map(|(g, dim)| SimConfig {
                g_name: g,
                dim,
                ..base.clone()
            })
            .collect()
    } else {
        vec![base.clone()]
    };
    for combo in &combos {
        combo.validate()?;
    }
    write_resolved(
        out,
        &json!({
            "command": "simulate",
            "out": out,
            "parallel": parallel,
            "configs": combos,
        }),
    )?;

    let workers = parallel.min(combos.len()).max(1);
    let reports: Vec<Result<RunReport>> = if workers == 1 {
        combos.iter().map(run_comparison).collect()
    } else {
        let mut slots: Vec<Option<Result<RunReport>>> = Vec::new();
        slots.resize_with(combos.len(), || None);
        let results: Vec<Vec<(usize, Result<RunReport>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let combos = &combos;
                    scope.spawn(move || {
                        combos
                            .iter()
                            .enumerate()
                            .skip(w)
                            .step_by(workers)
                            .map(|(i, c)| (i, run_comparison(c)))
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulation worker panicked"))
                .collect()
        });
        for worker in results {
            for (i, r) in worker {
                slots[i] = Some(r);
            }
        }
        slots
            .into_iter()
            .map(|s| s.expect("every combo assigned exactly once"))
            .collect()
    };

    for (combo, report) in combos.iter().zip(reports) {
        let report = report?;
        let stem = format!("sim_{}_dim{}", combo.g_name.as_str(), combo.dim);
        write_sim_csv(&out.join(format!("{stem}.csv")), &report)?;
        let summary = SimSummary {
            median_mse: report.median_mse(),
            report: &report,
        };
        std::fs::write(
            out.join(format!("{stem}.json")),
            serde_json::to_string_pretty(&summary)?,
        )?;
        let ok = report
            .outcomes
            .iter()
            .filter(|o| o.error.is_none())
            .count();
        let m = summary.median_mse;
        println!(
            "{} dim={}: {}/{} runs ok; median mse out-of-domain dsr {:.4e} l2 {:.4e}; in-domain dsr {:.4e} l2 {:.4e}",
            combo.g_name.as_str(),
            combo.dim,
            ok,
            combo.runs,
            m.dsr_out,
            m.l2_out,
            m.dsr_in,
            m.l2_in
        );
    }
    Ok(())
}

/// One row per evaluation point per estimator, in estimator-major
/// order; float formatting round-trips bit-exactly, so identical seeds
/// give identical bytes.
fn write_sim_csv(path: &PathBuf, report: &RunReport) -> Result<()> {
    let mut text = String::from("estimator,x_proj,oracle,mean,q10,q90\n");
    for (name, band) in [("dsr", &report.dsr), ("l2", &report.l2)] {
        for i in 0..report.grid.len() {
            text.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                report.grid[i], report.oracle[i], band.mean[i], band.q10[i], band.q90[i]
            ));
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs every registered gradient-fidelity composite; returns whether
/// all of them passed.
pub fn cmd_gradcheck(seed: Option<u64>, out: Option<&Path>) -> Result<bool> {
    let seed = CliConfig::default().seed_override(seed)?.unwrap_or(0);
    let outcomes: Vec<CompositeOutcome> = gradcheck_composites(seed)?;
    if let Some(out) = out {
        write_resolved(out, &json!({ "command": "gradcheck", "seed": seed }))?;
        std::fs::write(
            out.join("gradcheck-report.json"),
            serde_json::to_string_pretty(&outcomes)?,
        )?;
    }
    let mut all_passed = true;
    for o in &outcomes {
        println!(
            "{:<28} max rel error {:>12.6e}  threshold {:>8.1e}  {}",
            o.name,
            o.max_rel_error,
            o.threshold,
            if o.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= o.passed;
    }
    Ok(all_passed)
}
