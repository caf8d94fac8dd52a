//! Scratch calibration harness (not part of the suite; removed once
//! parameters are frozen).

use std::time::Instant;

use dsr_core::geomdata::{build_dataset, DatasetBuildConfig, Split};
use dsr_core::mix_seed;
use dsr_core::netzoo::{ModelParams, UNet3dSpec};
use dsr_core::predictor::{mc_upsample, PredictSpec};
use dsr_core::simlab::{
    ablation_suite, identity_mse, make_ground_truth, sample_dataset, AblationConfig, GName,
    SimConfig,
};
use dsr_core::trainer::{
    finetune_lpft, linear_probe, pretrain, train_mlp, FinetuneConfig, LossKind, NoiseSpec,
    TrainConfig,
};
use dsr_core::diffcore::Tensor;
use dsr_core::geomdata::{Aabb, CentroidGrid, VelocityTensor};

#[test]
#[ignore]
fn cal_c9() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = DatasetBuildConfig {
        big_t: 3,
        levels: 2,
        spacing: 0.45,
        finetune_fraction: 0.3,
        seed: 0,
        ..DatasetBuildConfig::default()
    };
    let t0 = Instant::now();
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    println!(
        "dataset: {:.2}s, pretrain {} ft {} test {}",
        t0.elapsed().as_secs_f64(),
        manifest.records_for(Split::Pretrain).len(),
        manifest.records_for(Split::Finetune).len(),
        manifest.records_for(Split::Test).len()
    );
    let pool = manifest.load_pairs::<f32>(tmp.path(), Split::Pretrain).unwrap();
    let ft_pairs = manifest.load_pairs::<f32>(tmp.path(), Split::Finetune).unwrap();
    let arch = UNet3dSpec { depth: 2, base_channels: 4, ..UNet3dSpec::default() };
    let init = ModelParams::<f32>::build_unet3d(arch, 1).unwrap();
    let t0 = Instant::now();
    let (pre, _) = pretrain(
        init,
        &pool,
        &[],
        &TrainConfig { epochs: 10, seed: 2, ..TrainConfig::default() },
    )
    .unwrap();
    println!("pretrain 10 epochs on {} pairs: {:.2}s", pool.len(), t0.elapsed().as_secs_f64());
    let fc = FinetuneConfig::default();
    let t0 = Instant::now();
    let (probe, _) = linear_probe(&pre, &ft_pairs, &fc).unwrap();
    println!("probe 300 epochs on {} pairs: {:.2}s", ft_pairs.len(), t0.elapsed().as_secs_f64());
    let t0 = Instant::now();
    let (_tuned, rep) = finetune_lpft(&pre, &ft_pairs, &fc).unwrap();
    println!(
        "lpft {:?} epochs: {:.2}s (probe was included)",
        rep.phase_epochs,
        t0.elapsed().as_secs_f64()
    );
    let same = pre
        .entries()
        .iter()
        .zip(probe.entries())
        .filter(|(a, b)| a.tensor.data() == b.tensor.data())
        .count();
    println!("probe: {} of {} tensors bit-identical to pretrained", same, pre.entries().len());
}

#[test]
#[ignore]
fn cal_c10() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = DatasetBuildConfig {
        big_t: 4,
        levels: 4,
        spacing: 0.25,
        patch_spacing_factor: 0.7,
        finetune_fraction: 0.3,
        coarsen: 1,
        sigma_v: 0.1,
        bias: dsr_core::geomdata::BiasField { base: 0.65, amplitude: 0.25, frequency: 0.4 },
        transfer_geometry: dsr_core::geomdata::FlowGeometry::StraightTube {
            radius: 2.0,
            length: 12.0,
        },
        seed: 0,
        ..DatasetBuildConfig::default()
    };
    let t0 = Instant::now();
    let manifest = build_dataset(&cfg, tmp.path()).unwrap();
    println!(
        "dataset: {:.2}s, pretrain {} val {} ft {} test {}",
        t0.elapsed().as_secs_f64(),
        manifest.records_for(Split::Pretrain).len(),
        manifest.records_for(Split::Validation).len(),
        manifest.records_for(Split::Finetune).len(),
        manifest.records_for(Split::Test).len()
    );
    let pool = manifest.load_pairs::<f32>(tmp.path(), Split::Pretrain).unwrap();
    let val = manifest.load_pairs::<f32>(tmp.path(), Split::Validation).unwrap();
    let ft = manifest.load_pairs::<f32>(tmp.path(), Split::Finetune).unwrap();
    let test = manifest.load_pairs::<f32>(tmp.path(), Split::Test).unwrap();
    println!("identity mse: {:.6}", identity_mse(&test).unwrap());

    let ac = AblationConfig {
        arch: UNet3dSpec { depth: 2, base_channels: 4, ..UNet3dSpec::default() },
        pretrain: TrainConfig { epochs: 30, learning_rate: 1e-3, ..TrainConfig::default() },
        finetune: FinetuneConfig {
            base: TrainConfig { learning_rate: 1e-3, ..TrainConfig::default() },
            probe_epochs: 40,
            full_epochs: 60,
        },
        predict_samples: 30,
        predict_sigma2: 0.01,
        level_options: vec![4],
        seed: 100,
    };
    for seed in [101u64, 102] {
        let cfg_s = AblationConfig { seed, ..ac.clone() };
        let t0 = Instant::now();
        let variants = ablation_suite(&pool, &val, &ft, &test, &cfg_s).unwrap();
        for v in &variants {
            println!(
                "seed={seed} pretrained={} levels={} mse={:.6} err={:?}",
                v.pretrained, v.levels, v.test_mse, v.error
            );
        }
        println!("seed {seed}: {:.2}s", t0.elapsed().as_secs_f64());
    }
}

#[test]
#[ignore]
fn cal_c11() {
    for t in [2usize, 3] {
        let n = 1usize << t;
        let arch = UNet3dSpec { depth: 2, base_channels: 4, ..UNet3dSpec::default() };
        let model = ModelParams::<f32>::build_unet3d(arch, 3).unwrap();
        let grid = CentroidGrid::new(Aabb { min: [0.0; 3], max: [1.0; 3] }, t);
        let data: Vec<f32> = (0..3 * n * n * n).map(|i| ((i % 17) as f32) / 17.0 - 0.4).collect();
        let input =
            VelocityTensor::new(grid, Tensor::new(vec![3, n, n, n], data).unwrap()).unwrap();
        let t0 = Instant::now();
        let reps = 8;
        for r in 0..reps {
            let spec = PredictSpec { samples: 100, sigma2: 0.05, seed: mix_seed(9, r) };
            mc_upsample(&model, &input, &spec).unwrap();
        }
        let per_forward = t0.elapsed().as_secs_f64() / (reps as f64 * 100.0);
        println!("t={t}: {:.3} ms per forward", per_forward * 1e3);
    }
}

#[test]
#[ignore]
fn cal_c8() {
    let base = SimConfig { g_name: GName::Square, ..SimConfig::default() };
    let truth = make_ground_truth(&base, 0).unwrap();
    for rep in 0..3u64 {
        let mut errs = Vec::new();
        for (k, n) in [(1u64, 250usize), (2, 1000)] {
            let cfg = SimConfig { n, ..base.clone() };
            let seed = mix_seed(mix_seed(0xC08, rep), k);
            let ds = sample_dataset(&cfg, &truth, seed).unwrap();
            let x = ds.x.convert::<f32>();
            let y = ds.y.convert::<f32>();
            let arch = dsr_core::netzoo::MlpSpec {
                input_dim: 3,
                hidden: cfg.hidden.clone(),
                activation: dsr_core::diffcore::Activation::Relu,
            };
            let init = ModelParams::<f32>::build_mlp(arch, mix_seed(seed, 1)).unwrap();
            let tc = TrainConfig {
                learning_rate: cfg.learning_rate,
                epochs: cfg.epochs,
                m: 8,
                noise: NoiseSpec::Diagonal { variances: truth.noise_variance.clone() },
                loss: LossKind::Energy,
                seed: mix_seed(seed, 2),
                ..TrainConfig::default()
            };
            let t0 = Instant::now();
            let (model, _) = train_mlp(init, &x, &y, &tc).unwrap();
            let beta_hat = model.extract_beta().unwrap();
            let raw = model.entries()[0].tensor.data().to_vec();
            let err: f64 = beta_hat
                .iter()
                .zip(&truth.beta)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            println!(
                "rep {rep} n={n}: err {err:.4} beta_hat {beta_hat:?} raw_w {raw:?} ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
            errs.push(err);
        }
        println!("rep {rep}: decreased = {}", errs[1] < errs[0]);
    }
}
