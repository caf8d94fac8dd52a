//! Adam with bias correction, applied only to trainable parameters.

use crate::diffcore::Tensor;
use crate::netzoo::ModelParams;
use crate::{DsrError, Real, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment accumulators, one pair per model entry. A state
/// is bound to one training phase: freshly constructed at phase start,
/// stepped once per batch.
#[derive(Debug, Clone)]
pub struct AdamState<T: Real> {
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &ModelParams<T>) -> Self {
        let first = model
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.tensor.shape()))
            .collect::<Vec<_>>();
        let second = first.clone();
        Self {
            first,
            second,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step. `grads[i]` belongs to model entry `i`; entries
/// that are frozen or received no gradient are left untouched (their
/// moments do not advance either). The step counter is shared by all
/// entries.
pub fn adam_step<T: Real>(
    model: &mut ModelParams<T>,
    grads: &[Option<Tensor<T>>],
    state: &mut AdamState<T>,
    learning_rate: f64,
) -> Result<()> {
    if grads.len() != state.first.len() {
        return Err(DsrError::Dimension(format!(
            "{} gradients supplied for {} parameter entries",
            grads.len(),
            state.first.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let b1 = T::from_f64(BETA1);
    let nb1 = T::from_f64(1.0 - BETA1);
    let b2 = T::from_f64(BETA2);
    let nb2 = T::from_f64(1.0 - BETA2);
    let eps = T::from_f64(EPS);
    let scale = T::from_f64(learning_rate / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    for i in 0..grads.len() {
        let entry = &mut model.entry_mut(i);
        if !entry.trainable {
            continue;
        }
        let Some(grad) = &grads[i] else { continue };
        if grad.shape() != entry.tensor.shape() {
            return Err(DsrError::Dimension(format!(
                "gradient shape {:?} does not match parameter '{}' shape {:?}",
                grad.shape(),
                entry.name,
                entry.tensor.shape()
            )));
        }
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        let p = entry.tensor.data_mut();
        for ((pc, gc), (mc, vc)) in p
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = *gc;
            *mc = b1 * *mc + nb1 * g;
            *vc = b2 * *vc + nb2 * g * g;
            let vhat = *vc * inv_bc2;
            *pc -= scale * *mc / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
