//! The training loops themselves.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adam::{adam_step, AdamState};
use super::config::{FinetuneConfig, LossKind, NoiseSpec, TrainConfig, TrainReport};
use crate::diffcore::{Graph, Tensor};
use crate::energy::LossValue;
use crate::geomdata::PatchPair;
use crate::netzoo::ModelParams;
use crate::{mix_seed, DsrError, Real, Result};

// Independent seed streams, so noise draws, shuffling order, validation
// draws and head re-initialization never share generator state.
const STREAM_TRAIN: u64 = 1;
const STREAM_VAL: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;
const STREAM_HEAD: u64 = 4;
const STREAM_PHASE2: u64 = 5;

/// Adds iid noise to a `[rows, features]` tensor; diagonal specs give
/// one variance per feature column. Exactly-zero noise consumes no
/// draws and returns a verbatim copy.
pub fn noised_rows<T: Real, R: Rng + ?Sized>(
    x: &Tensor<T>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if x.shape().len() != 2 {
        return Err(DsrError::Dimension(format!(
            "row data must be [rows, features], got {:?}",
            x.shape()
        )));
    }
    if noise.is_zero() {
        return Ok(x.clone());
    }
    let d = x.shape()[1];
    let sd: Vec<T> = noise
        .std_devs(d)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let mut out = x.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v += sd[k % d] * T::standard_normal(rng);
    }
    Ok(out)
}

/// Adds iid noise to a `[3, s, s, s]` velocity volume; diagonal specs
/// give one variance per channel.
pub fn noised_volume<T: Real, R: Rng + ?Sized>(
    v: &Tensor<T>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if v.shape().len() != 4 || v.shape()[0] != 3 {
        return Err(DsrError::Dimension(format!(
            "velocity volume must be [3, s, s, s], got {:?}",
            v.shape()
        )));
    }
    if noise.is_zero() {
        return Ok(v.clone());
    }
    let slab = v.len() / 3;
    let sd: Vec<T> = noise
        .std_devs(3)?
        .into_iter()
        .map(T::from_f64)
        .collect();
    let mut out = v.clone();
    for (k, val) in out.data_mut().iter_mut().enumerate() {
        *val += sd[k / slab] * T::standard_normal(rng);
    }
    Ok(out)
}

fn non_finite_loss(phase: &str, epoch: usize, batch: usize, loss: &LossValue) -> DsrError {
    DsrError::Numeric(format!(
        "non-finite {phase} loss at epoch {epoch}, batch {batch}: \
         total={:e}, data={:e}, spread={:e}; aborting before the parameters degrade further",
        loss.total, loss.data_term, loss.spread_term
    ))
}

/// Forward (and optionally backward) pass over one batch of patch
/// pairs. Returns per-entry gradients aligned with the model's entry
/// order (None for frozen entries) and the batch loss.
fn volumetric_step<T: Real>(
    model: &ModelParams<T>,
    batch: &[&PatchPair<T>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    with_grad: bool,
) -> Result<(Vec<Option<Tensor<T>>>, LossValue)> {
    let m = config.effective_m();
    let mut g = Graph::new();
    let param_ids = model.insert_into_graph(&mut g);
    let mut targets = Vec::with_capacity(batch.len());
    let mut fans = Vec::with_capacity(batch.len());
    for pair in batch {
        targets.push(pair.target.values().clone());
        let mut fan = Vec::with_capacity(m);
        for _ in 0..m {
            let noised = noised_volume(pair.input.values(), &config.noise, rng)?;
            let input = g.constant(noised);
            fan.push(model.forward(&mut g, &param_ids, input)?);
        }
        fans.push(fan);
    }
    let (loss_node, loss) = match config.loss {
        LossKind::Energy => g.energy_loss_vector(targets, fans)?,
        LossKind::Mse => {
            let preds = fans.into_iter().map(|fan| fan[0]).collect();
            g.mse_loss(targets, preds)?
        }
    };
    let grads = if with_grad {
        g.backward(loss_node)?;
        param_ids.iter().map(|&id| g.take_grad(id)).collect()
    } else {
        vec![None; param_ids.len()]
    };
    Ok((grads, loss))
}

/// Loss of a model on a set of pairs under the configured objective,
/// without touching any parameters. Noise (when the config carries
/// any) is drawn from `seed`.
pub fn evaluate_pairs_loss<T: Real>(
    model: &ModelParams<T>,
    pairs: &[PatchPair<T>],
    config: &TrainConfig,
    seed: u64,
) -> Result<LossValue> {
    if pairs.is_empty() {
        return Err(DsrError::Usage("cannot evaluate on zero pairs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut data = 0.0;
    let mut spread = 0.0;
    let mut weight = 0.0;
    for chunk in pairs.chunks(config.batch_size) {
        let batch: Vec<&PatchPair<T>> = chunk.iter().collect();
        let (_, loss) = volumetric_step(model, &batch, config, &mut rng, false)?;
        let w = chunk.len() as f64;
        total += w * loss.total;
        data += w * loss.data_term;
        spread += w * loss.spread_term;
        weight += w;
    }
    Ok(LossValue {
        total: total / weight,
        data_term: data / weight,
        spread_term: spread / weight,
    })
}

/// One seeded pass over the training pairs per epoch (shuffled
/// batches), with an optional validation loss after each epoch.
/// Returns the trained model plus per-epoch train/validation losses.
fn run_volumetric_phase<T: Real>(
    mut model: ModelParams<T>,
    train: &[PatchPair<T>],
    val: &[PatchPair<T>],
    config: &TrainConfig,
    phase_label: &str,
) -> Result<(ModelParams<T>, Vec<f64>, Vec<f64>)> {
    config.validate()?;
    if train.is_empty() {
        return Err(DsrError::Usage(format!(
            "{phase_label}: no training pairs supplied"
        )));
    }
    let mut state = AdamState::new(&model);
    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut val_losses = Vec::new();
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            mix_seed(config.seed, STREAM_SHUFFLE),
            epoch as u64,
        )));
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            mix_seed(config.seed, STREAM_TRAIN),
            epoch as u64,
        ));
        let mut epoch_loss = 0.0;
        for (batch_no, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PatchPair<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let (grads, loss) = volumetric_step(&model, &batch, config, &mut rng, true)?;
            if !loss.total.is_finite() {
                return Err(non_finite_loss(phase_label, epoch, batch_no, &loss));
            }
            adam_step(&mut model, &grads, &mut state, config.learning_rate)?;
            epoch_loss += loss.total * chunk.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        train_losses.push(train_loss);
        let mut val_loss = f64::NAN;
        if !val.is_empty() {
            let v = evaluate_pairs_loss(
                &model,
                val,
                config,
                mix_seed(mix_seed(config.seed, STREAM_VAL), epoch as u64),
            )?;
            val_losses.push(v.total);
            val_loss = v.total;
        }
        if config.log_every > 0 && (epoch + 1) % config.log_every == 0 {
            if val.is_empty() {
                println!("{phase_label} epoch {:>4}: train {train_loss:.6}", epoch + 1);
            } else {
                println!(
                    "{phase_label} epoch {:>4}: train {train_loss:.6}  val {val_loss:.6}",
                    epoch + 1
                );
            }
        }
    }
    Ok((model, train_losses, val_losses))
}

/// Trains a volumetric model on coarsened/full-resolution pairs,
/// drawing fresh input noise every epoch. Deterministic given
/// `config.seed`.
pub fn pretrain<T: Real>(
    model: ModelParams<T>,
    train: &[PatchPair<T>],
    val: &[PatchPair<T>],
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    let t0 = Instant::now();
    let (model, train_loss, val_loss) =
        run_volumetric_phase(model, train, val, config, "pretrain")?;
    let report = TrainReport {
        train_loss,
        val_loss,
        phase_epochs: vec![config.epochs],
        wall_seconds: t0.elapsed().as_secs_f64(),
        seed: config.seed,
        checkpoint: None,
    };
    Ok((model, report))
}

/// Phase 1 of the adaptation schedule: re-initialize the final layer
/// (seeded from the config) and train only it, leaving every other
/// tensor bit-identical to the pretrained checkpoint.
pub fn linear_probe<T: Real>(
    pretrained: &ModelParams<T>,
    pairs: &[PatchPair<T>],
    config: &FinetuneConfig,
) -> Result<(ModelParams<T>, Vec<f64>)> {
    config.validate()?;
    let model = pretrained.replace_head(mix_seed(config.base.seed, STREAM_HEAD));
    let probe_cfg = TrainConfig {
        epochs: config.probe_epochs,
        ..config.base.clone()
    };
    let (model, losses, _) = run_volumetric_phase(model, pairs, &[], &probe_cfg, "probe")?;
    Ok((model, losses))
}

/// Two-phase adaptation: linear probing of a fresh final layer, then
/// full fine-tuning of all parameters, each phase with its own
/// optimizer state.
pub fn finetune_lpft<T: Real>(
    pretrained: &ModelParams<T>,
    pairs: &[PatchPair<T>],
    config: &FinetuneConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    let t0 = Instant::now();
    let (mut model, mut losses) = linear_probe(pretrained, pairs, config)?;
    model.set_all_trainable();
    let full_cfg = TrainConfig {
        epochs: config.full_epochs,
        seed: mix_seed(config.base.seed, STREAM_PHASE2),
        ..config.base.clone()
    };
    let (model, full_losses, _) = run_volumetric_phase(model, pairs, &[], &full_cfg, "finetune")?;
    losses.extend(full_losses);
    let report = TrainReport {
        train_loss: losses,
        val_loss: Vec::new(),
        phase_epochs: vec![config.probe_epochs, config.full_epochs],
        wall_seconds: t0.elapsed().as_secs_f64(),
        seed: config.base.seed,
        checkpoint: None,
    };
    Ok((model, report))
}

/// Full-batch training of a scalar-output model on row data
/// `x: [n, d]`, `y: n` targets. The same loop serves the energy
/// objective (m noised replicates per epoch) and plain MSE.
pub fn train_mlp<T: Real>(
    model: ModelParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    config.validate()?;
    if x.shape().len() != 2 {
        return Err(DsrError::Dimension(format!(
            "row data must be [rows, features], got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    if y.len() != n || n == 0 {
        return Err(DsrError::Dimension(format!(
            "{n} inputs vs {} targets",
            y.len()
        )));
    }
    let t0 = Instant::now();
    let m = config.effective_m();
    let targets_flat = Tensor::new(vec![n], y.data().to_vec())?;
    let targets_col = Tensor::new(vec![n, 1], y.data().to_vec())?;
    let mut model = model;
    let mut state = AdamState::new(&model);
    let mut train_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            mix_seed(config.seed, STREAM_TRAIN),
            epoch as u64,
        ));
        let mut g = Graph::new();
        let param_ids = model.insert_into_graph(&mut g);
        let mut fan = Vec::with_capacity(m);
        for _ in 0..m {
            let noised = noised_rows(x, &config.noise, &mut rng)?;
            let input = g.constant(noised);
            fan.push(model.forward(&mut g, &param_ids, input)?);
        }
        let (loss_node, loss) = match config.loss {
            LossKind::Energy => g.energy_loss_scalar_batch(targets_flat.clone(), &fan)?,
            LossKind::Mse => g.mse_loss(vec![targets_col.clone()], vec![fan[0]])?,
        };
        if !loss.total.is_finite() {
            return Err(non_finite_loss("train", epoch, 0, &loss));
        }
        g.backward(loss_node)?;
        let grads: Vec<Option<Tensor<T>>> = param_ids.iter().map(|&id| g.take_grad(id)).collect();
        adam_step(&mut model, &grads, &mut state, config.learning_rate)?;
        train_losses.push(loss.total);
        if config.log_every > 0 && (epoch + 1) % config.log_every == 0 {
            println!(
                "train epoch {:>5}: loss {:.6} (data {:.6}, spread {:.6})",
                epoch + 1,
                loss.total,
                loss.data_term,
                loss.spread_term
            );
        }
    }
    let report = TrainReport {
        train_loss: train_losses,
        val_loss: Vec::new(),
        phase_epochs: vec![config.epochs],
        wall_seconds: t0.elapsed().as_secs_f64(),
        seed: config.seed,
        checkpoint: None,
    };
    Ok((model, report))
}

/// The regression baseline: the same loop restricted to a single
/// deterministic prediction per row under squared error. Learning
/// rate, epochs and seed are taken from `config`; loss kind, replicate
/// count and noise are forced to the baseline's definition.
pub fn train_l2_baseline<T: Real>(
    model: ModelParams<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    config: &TrainConfig,
) -> Result<(ModelParams<T>, TrainReport)> {
    let cfg = TrainConfig {
        loss: LossKind::Mse,
        m: 1,
        noise: NoiseSpec::none(),
        ..config.clone()
    };
    train_mlp(model, x, y, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;
    use crate::geomdata::{Aabb, CentroidGrid, VelocityTensor};
    use crate::netzoo::{ArchSpec, MlpSpec, UNet3dSpec};

    fn mlp(input_dim: usize, hidden: Vec<usize>, seed: u64) -> ModelParams<f64> {
        ModelParams::build(
            &ArchSpec::Mlp(MlpSpec {
                input_dim,
                hidden,
                activation: Activation::Relu,
            }),
            seed,
        )
        .unwrap()
    }

    fn tiny_unet(seed: u64) -> ModelParams<f64> {
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

    fn synthetic_pair(seed: u64) -> PatchPair<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = CentroidGrid::new(
            Aabb {
                min: [0.0; 3],
                max: [1.0; 3],
            },
            1,
        );
        let mut tgt = vec![0.0; 3 * 8];
        for v in tgt.iter_mut() {
            *v = rng.gen::<f64>() - 0.5;
        }
        let mut inp = tgt.clone();
        for v in inp.iter_mut() {
            *v += 0.1 * (rng.gen::<f64>() - 0.5);
        }
        PatchPair {
            input: VelocityTensor::new(
                grid.clone(),
                Tensor::new(vec![3, 2, 2, 2], inp).unwrap(),
            )
            .unwrap(),
            target: VelocityTensor::new(grid, Tensor::new(vec![3, 2, 2, 2], tgt).unwrap())
                .unwrap(),
            level: 1,
            patch_id: 0,
        }
    }

    #[test]
    fn l2_baseline_solves_noiseless_linear_data() {
        // no hidden layers: projection then affine head, an exactly
        // linear model; squared loss should reach ~0
        let model = mlp(1, vec![], 3);
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 2.3 * x - 0.7).collect();
        let x = Tensor::new(vec![n, 1], xs).unwrap();
        let y = Tensor::new(vec![n], ys).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 400,
            seed: 5,
            ..TrainConfig::default()
        };
        let (_, report) = train_l2_baseline(model, &x, &y, &cfg).unwrap();
        let last = *report.train_loss.last().unwrap();
        assert!(last < 1e-3, "final mse {last}");
        assert!(report.train_loss.iter().all(|l| *l >= 0.0));
        assert_eq!(report.epochs(), 400);
    }

    #[test]
    fn zero_noise_energy_training_is_independent_of_m() {
        // with no input noise all replicates coincide, the spread term
        // is exactly zero, and the gradient equals the m = 1 norm-loss
        // gradient -- so the trained parameters cannot depend on m
        let x = Tensor::new(vec![8, 2], (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = Tensor::new(vec![8], (0..8).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut finals = Vec::new();
        for m in [1usize, 4] {
            let cfg = TrainConfig {
                learning_rate: 1e-2,
                epochs: 5,
                m,
                noise: NoiseSpec::none(),
                seed: 9,
                ..TrainConfig::default()
            };
            let (trained, report) = train_mlp(mlp(2, vec![4], 1), &x, &y, &cfg).unwrap();
            assert!(report.train_loss.iter().all(|l| l.is_finite()));
            finals.push(trained);
        }
        for (a, b) in finals[0].entries().iter().zip(finals[1].entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data(), "entry {}", a.name);
        }
    }

    #[test]
    fn volumetric_training_is_bit_reproducible() {
        let pairs = vec![synthetic_pair(1), synthetic_pair(2), synthetic_pair(3)];
        let val = vec![synthetic_pair(4)];
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            epochs: 2,
            batch_size: 2,
            m: 2,
            noise: NoiseSpec::isotropic(0.01),
            seed: 13,
            ..TrainConfig::default()
        };
        let (ma, ra) = pretrain(tiny_unet(7), &pairs, &val, &cfg).unwrap();
        let (mb, rb) = pretrain(tiny_unet(7), &pairs, &val, &cfg).unwrap();
        assert_eq!(ra.train_loss, rb.train_loss);
        assert_eq!(ra.val_loss, rb.val_loss);
        assert_eq!(ra.val_loss.len(), 2);
        for (a, b) in ma.entries().iter().zip(mb.entries()) {
            assert_eq!(a.tensor.data(), b.tensor.data());
        }
    }

    #[test]
    fn one_epoch_on_a_singleton_usually_reduces_the_loss() {
        let mut improved = 0;
        for seed in 0..10u64 {
            let pairs = vec![synthetic_pair(100 + seed)];
            let cfg = TrainConfig {
                learning_rate: 1e-3,
                epochs: 1,
                batch_size: 1,
                m: 2,
                noise: NoiseSpec::isotropic(0.01),
                seed,
                ..TrainConfig::default()
            };
            let model = tiny_unet(seed);
            let before = evaluate_pairs_loss(&model, &pairs, &cfg, 999).unwrap();
            let (after_model, _) = pretrain(model, &pairs, &[], &cfg).unwrap();
            let after = evaluate_pairs_loss(&after_model, &pairs, &cfg, 999).unwrap();
            if after.total < before.total {
                improved += 1;
            }
        }
        assert!(improved >= 9, "loss decreased in only {improved}/10 seeds");
    }

    #[test]
    fn linear_probe_keeps_non_head_tensors_bit_identical() {
        let pretrained = tiny_unet(21);
        let pairs = vec![synthetic_pair(5)];
        let config = FinetuneConfig {
            base: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 1,
                m: 2,
                noise: NoiseSpec::isotropic(0.01),
                seed: 3,
                ..TrainConfig::default()
            },
            probe_epochs: 3,
            full_epochs: 2,
        };
        let (probed, losses) = linear_probe(&pretrained, &pairs, &config).unwrap();
        assert_eq!(losses.len(), 3);
        let mut head_moved = false;
        for (a, b) in probed.entries().iter().zip(pretrained.entries()) {
            if a.name.starts_with("head.") {
                head_moved |= a.tensor.data() != b.tensor.data();
            } else {
                assert_eq!(a.tensor.data(), b.tensor.data(), "entry {}", a.name);
                assert!(!a.trainable, "non-head entry {} should be frozen", a.name);
            }
        }
        assert!(head_moved, "probing must change the re-initialized head");

        // the full schedule then reports both phases and unfreezes all
        let (tuned, report) = finetune_lpft(&pretrained, &pairs, &config).unwrap();
        assert_eq!(report.phase_epochs, vec![3, 2]);
        assert_eq!(report.train_loss.len(), 5);
        assert!(tuned.entries().iter().all(|e| e.trainable));
        let non_head_moved = tuned
            .entries()
            .iter()
            .zip(pretrained.entries())
            .filter(|(a, _)| !a.name.starts_with("head."))
            .any(|(a, b)| a.tensor.data() != b.tensor.data());
        assert!(non_head_moved, "full phase should move non-head tensors");
    }

    #[test]
    fn exploding_training_aborts_with_a_numeric_error() {
        let x = Tensor::new(vec![4, 1], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let y = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let model: ModelParams<f32> = ModelParams::build(
            &ArchSpec::Mlp(MlpSpec {
                input_dim: 1,
                hidden: vec![4],
                activation: Activation::Relu,
            }),
            1,
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e30,
            epochs: 5,
            loss: LossKind::Mse,
            m: 1,
            noise: NoiseSpec::none(),
            ..TrainConfig::default()
        };
        let err = train_mlp(model, &x, &y, &cfg).unwrap_err();
        match err {
            DsrError::Numeric(msg) => assert!(msg.contains("epoch"), "{msg}"),
            other => panic!("expected a numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn noise_helpers_respect_shape_and_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![500, 2], vec![0.0; 1000]).unwrap();
        let noise = NoiseSpec::Diagonal {
            variances: vec![4.0, 0.0],
        };
        let noised = noised_rows::<f64, _>(&x, &noise, &mut rng).unwrap();
        let mut var0 = 0.0;
        for r in 0..500 {
            assert_eq!(noised.data()[2 * r + 1], 0.0, "zero-variance column moved");
            var0 += noised.data()[2 * r] * noised.data()[2 * r];
        }
        var0 /= 500.0;
        assert!((var0 - 4.0).abs() < 0.8, "sample variance {var0}");

        let v = Tensor::new(vec![3, 2, 2, 2], vec![1.0; 24]).unwrap();
        let noise = NoiseSpec::Diagonal {
            variances: vec![0.0, 1.0, 0.0],
        };
        let noised = noised_volume::<f64, _>(&v, &noise, &mut rng).unwrap();
        assert_eq!(&noised.data()[0..8], &[1.0; 8]);
        assert_eq!(&noised.data()[16..24], &[1.0; 8]);
        assert!(noised.data()[8..16].iter().any(|x| *x != 1.0));

        assert!(noised_volume::<f64, _>(&x, &NoiseSpec::none(), &mut rng).is_err());
        assert!(
            noised_rows::<f64, _>(&v, &NoiseSpec::none(), &mut rng).is_err()
        );
    }
}
