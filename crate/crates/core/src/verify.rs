//! Named gradient-fidelity checks: each composite pairs a network
//! forward with a loss head and validates the tape's analytic
//! gradients against central finite differences. The 32-bit composite
//! is checked against a 64-bit oracle of the same computation, since a
//! 32-bit difference quotient would drown in its own roundoff.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{grad_check, grad_check_pair, Activation, Graph, NodeId, Tensor};
use crate::netzoo::{MlpSpec, ModelParams, UNet3dSpec};
use crate::trainer::{noised_rows, noised_volume, NoiseSpec};
use crate::{mix_seed, Real, Result};

fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data lengths agree by construction")
}

/// Result of one registered composite.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositeOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub probes: usize,
    pub passed: bool,
}

/// Runs every registered composite in a fixed order. Deterministic
/// given `seed`; a composite fails by exceeding its threshold, not by
/// erroring.
pub fn gradcheck_composites(seed: u64) -> Result<Vec<CompositeOutcome>> {
    Ok(vec![
        mlp_energy_scalar(mix_seed(seed, 1))?,
        unet_energy_vector(mix_seed(seed, 2))?,
    ])
}

/// A 64-bit MLP under the scalar-batch energy loss: 12 observations,
/// a fan of 3 noised forward passes each. Softplus keeps the composite
/// smooth, so the 1e-6 bar is meaningful: a central difference quotient
/// straddling a hinge kink would report an O(1) discrepancy that says
/// nothing about the tape.
fn mlp_energy_scalar(seed: u64) -> Result<CompositeOutcome> {
    let threshold = 1e-6;
    let spec = MlpSpec {
        input_dim: 4,
        hidden: vec![8, 6],
        activation: Activation::Softplus,
    };
    let model = ModelParams::<f64>::build_mlp(spec, mix_seed(seed, 1))?;
    let params: Vec<Tensor<f64>> = model.entries().iter().map(|e| e.tensor.clone()).collect();

    let n = 12;
    let m = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let base = uniform_tensor(&[n, 4], -1.0, 1.0, &mut rng);
    let noise = NoiseSpec::isotropic(0.05);
    let inputs: Vec<Tensor<f64>> = (0..m)
        .map(|_| noised_rows(&base, &noise, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let targets = uniform_tensor(&[n], -1.0, 1.0, &mut rng);

    let build = |g: &mut Graph<f64>, ids: &[NodeId]| -> Result<NodeId> {
        let fan = inputs
            .iter()
            .map(|x| {
                let input = g.constant(x.clone());
                model.forward(g, ids, input)
            })
            .collect::<Result<Vec<_>>>()?;
        let (loss, _) = g.energy_loss_scalar_batch(targets.clone(), &fan)?;
        Ok(loss)
    };
    let report = grad_check(&params, 48, 1e-5, mix_seed(seed, 3), build)?;
    Ok(CompositeOutcome {
        name: "mlp_energy_scalar_f64".into(),
        max_rel_error: report.max_rel_error,
        threshold,
        probes: report.probes,
        passed: report.max_rel_error < threshold,
    })
}

/// A 32-bit 16-cubed U-Net under the grouped (vector) energy loss,
/// two observations with a 2-fan each, checked against the same
/// composite evaluated at 64 bits.
fn unet_energy_vector(seed: u64) -> Result<CompositeOutcome> {
    let threshold = 1e-3;
    let spec = UNet3dSpec {
        depth: 2,
        base_channels: 4,
        kernel: 3,
        leaky_alpha: 0.01,
    };
    let model32 = ModelParams::<f32>::build_unet3d(spec.clone(), mix_seed(seed, 1))?;
    let model64 = ModelParams::<f64>::build_unet3d(spec, mix_seed(seed, 1))?;
    let params: Vec<Tensor<f32>> = model32.entries().iter().map(|e| e.tensor.clone()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 2));
    let side = 16;
    let noise = NoiseSpec::isotropic(0.01);
    let n_obs = 2;
    let m = 2;
    let mut inputs64: Vec<Vec<Tensor<f64>>> = Vec::with_capacity(n_obs);
    let mut targets64: Vec<Tensor<f64>> = Vec::with_capacity(n_obs);
    for _ in 0..n_obs {
        let base = uniform_tensor(&[3, side, side, side], -0.5, 0.5, &mut rng);
        let fan = (0..m)
            .map(|_| noised_volume(&base, &noise, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        inputs64.push(fan);
        targets64.push(uniform_tensor(&[3, side, side, side], -0.5, 0.5, &mut rng));
    }
    let inputs32: Vec<Vec<Tensor<f32>>> = inputs64
        .iter()
        .map(|fan| fan.iter().map(|t| t.convert::<f32>()).collect())
        .collect();
    let targets32: Vec<Tensor<f32>> = targets64.iter().map(|t| t.convert::<f32>()).collect();
    // the oracle sees the f32 inputs lifted exactly to f64, so both
    // dtypes evaluate the same function of the parameters
    let inputs64: Vec<Vec<Tensor<f64>>> = inputs32
        .iter()
        .map(|fan| fan.iter().map(|t| t.convert::<f64>()).collect())
        .collect();
    let targets64: Vec<Tensor<f64>> = targets32.iter().map(|t| t.convert::<f64>()).collect();

    fn build_loss<T: Real>(
        g: &mut Graph<T>,
        ids: &[NodeId],
        model: &ModelParams<T>,
        inputs: &[Vec<Tensor<T>>],
        targets: &[Tensor<T>],
    ) -> Result<NodeId> {
        let mut fans = Vec::with_capacity(inputs.len());
        for fan_inputs in inputs {
            let fan = fan_inputs
                .iter()
                .map(|x| {
                    let input = g.constant(x.clone());
                    model.forward(g, ids, input)
                })
                .collect::<Result<Vec<_>>>()?;
            fans.push(fan);
        }
        let (loss, _) = g.energy_loss_vector(targets.to_vec(), fans)?;
        Ok(loss)
    }

    let report = grad_check_pair::<f32, f64, _, _>(
        &params,
        24,
        1e-5,
        mix_seed(seed, 3),
        |g, ids| build_loss(g, ids, &model32, &inputs32, &targets32),
        |g, ids| build_loss(g, ids, &model64, &inputs64, &targets64),
    )?;
    Ok(CompositeOutcome {
        name: "unet16_energy_vector_f32".into(),
        max_rel_error: report.max_rel_error,
        threshold,
        probes: report.probes,
        passed: report.max_rel_error < threshold,
    })
}
