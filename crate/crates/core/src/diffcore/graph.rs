//! Reverse-mode autodiff tape.
//!
//! Operations append nodes eagerly (values are computed at build time), so a
//! node's inputs always have smaller indices and the tape order doubles as a
//! topological order. `backward` walks from the loss node down to index 0,
//! pushing each node's accumulated gradient into its inputs. Gradients are
//! only materialized for nodes that transitively require them (`needs_grad`),
//! which is what makes the linear-probe phase cheap: with every layer but the
//! head frozen, backpropagation stops at the head's inputs.

use crate::energy::{self, LossValue};
use crate::{DsrError, Real, Result};

use super::ops::{self, Activation};
use super::Tensor;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op<T> {
    Leaf,
    Affine { input: NodeId, weights: NodeId, bias: NodeId },
    Conv3d { input: NodeId, kernel: NodeId, bias: NodeId },
    AvgPool3d { input: NodeId },
    Upsample3d { input: NodeId, factor: usize },
    Activation { input: NodeId, kind: Activation },
    Add { lhs: NodeId, rhs: NodeId },
    Scale { input: NodeId, factor: T },
    ConcatChannels { lhs: NodeId, rhs: NodeId },
    /// Fused energy score over element-aligned scalar observations.
    EnergyScalar { targets: Tensor<T>, samples: Vec<NodeId> },
    /// Fused energy score over whole-tensor observations.
    EnergyVector { targets: Vec<Tensor<T>>, samples: Vec<Vec<NodeId>> },
    /// Fused mean-squared-error over whole-tensor observations.
    Mse { targets: Vec<Tensor<T>>, preds: Vec<NodeId> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    needs_grad: bool,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Constant leaf: holds data, never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Parameter leaf: gradient is accumulated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    /// Clears every accumulated gradient; values and structure stay.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, needs_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // -- differentiable operations -------------------------------------------

    pub fn affine(&mut self, input: NodeId, weights: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::affine(self.value(input), self.value(weights), self.value(bias))?;
        let needs = self.needs(input) || self.needs(weights) || self.needs(bias);
        Ok(self.push(value, needs, Op::Affine { input, weights, bias }))
    }

    pub fn conv3d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let value = ops::conv3d(self.value(input), self.value(kernel), self.value(bias))?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(value, needs, Op::Conv3d { input, kernel, bias }))
    }

    pub fn avg_pool3d(&mut self, input: NodeId) -> Result<NodeId> {
        let value = ops::avg_pool3d(self.value(input))?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::AvgPool3d { input }))
    }

    pub fn nearest_upsample3d(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let value = ops::nearest_upsample3d(self.value(input), factor)?;
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Upsample3d { input, factor }))
    }

    pub fn activation(&mut self, input: NodeId, kind: Activation) -> Result<NodeId> {
        let value = self.value(input).map(|v| kind.apply(v));
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Activation { input, kind }))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = self.value(lhs).add(self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, needs, Op::Add { lhs, rhs }))
    }

    pub fn scale(&mut self, input: NodeId, factor: T) -> Result<NodeId> {
        let value = self.value(input).scale(factor);
        let needs = self.needs(input);
        Ok(self.push(value, needs, Op::Scale { input, factor }))
    }

    pub fn concat_channels(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let value = ops::concat_channels(self.value(lhs), self.value(rhs))?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(value, needs, Op::ConcatChannels { lhs, rhs }))
    }

    // -- fused loss heads ------------------------------------------------------

    /// Energy score where `targets` holds n scalar observations and each of
    /// the m `samples` nodes holds the n matching predictions (any shape with
    /// the same element count). Returns the scalar loss node and the loss
    /// split for reporting.
    pub fn energy_loss_scalar_batch(
        &mut self,
        targets: Tensor<T>,
        samples: &[NodeId],
    ) -> Result<(NodeId, LossValue)> {
        if samples.len() < 2 {
            return Err(DsrError::Config(format!(
                "energy loss needs at least 2 replicate predictions, got {}",
                samples.len()
            )));
        }
        for &s in samples {
            if self.value(s).len() != targets.len() {
                return Err(DsrError::Dimension(format!(
                    "energy loss: sample has {} elements, targets have {}",
                    self.value(s).len(),
                    targets.len()
                )));
            }
        }
        let cols: Vec<&[T]> = samples.iter().map(|&s| self.value(s).data()).collect();
        let (loss, _) = energy::scalar_rows_loss_grad(targets.data(), &cols, false);
        let needs = samples.iter().any(|&s| self.needs(s));
        let id = self.push(
            Tensor::scalar(T::from_f64(loss.total)),
            needs,
            Op::EnergyScalar {
                targets,
                samples: samples.to_vec(),
            },
        );
        Ok((id, loss))
    }

    /// Energy score over whole-tensor observations: `samples[i]` holds the m
    /// replicate prediction nodes for `targets[i]`.
    pub fn energy_loss_vector(
        &mut self,
        targets: Vec<Tensor<T>>,
        samples: Vec<Vec<NodeId>>,
    ) -> Result<(NodeId, LossValue)> {
        if targets.is_empty() || samples.len() != targets.len() {
            return Err(DsrError::Dimension(format!(
                "energy loss: {} targets vs {} sample groups",
                targets.len(),
                samples.len()
            )));
        }
        let m = samples[0].len();
        if m < 2 {
            return Err(DsrError::Config(format!(
                "energy loss needs at least 2 replicate predictions, got {m}"
            )));
        }
        for (i, group) in samples.iter().enumerate() {
            if group.len() != m {
                return Err(DsrError::Dimension(format!(
                    "energy loss: observation {i} has {} replicates, expected {m}",
                    group.len()
                )));
            }
            for &s in group {
                if self.value(s).shape() != targets[i].shape() {
                    return Err(DsrError::Dimension(format!(
                        "energy loss: sample shape {:?} vs target shape {:?}",
                        self.value(s).shape(),
                        targets[i].shape()
                    )));
                }
            }
        }
        let target_refs: Vec<&Tensor<T>> = targets.iter().collect();
        let sample_refs: Vec<Vec<&Tensor<T>>> = samples
            .iter()
            .map(|group| group.iter().map(|&s| self.value(s)).collect())
            .collect();
        let (loss, _) = energy::vector_obs_loss_grad(&target_refs, &sample_refs, false);
        let needs = samples.iter().flatten().any(|&s| self.needs(s));
        let id = self.push(
            Tensor::scalar(T::from_f64(loss.total)),
            needs,
            Op::EnergyVector { targets, samples },
        );
        Ok((id, loss))
    }

    /// Mean squared error over whole-tensor observations (single prediction
    /// per target).
    pub fn mse_loss(
        &mut self,
        targets: Vec<Tensor<T>>,
        preds: Vec<NodeId>,
    ) -> Result<(NodeId, LossValue)> {
        if targets.is_empty() || preds.len() != targets.len() {
            return Err(DsrError::Dimension(format!(
                "mse loss: {} targets vs {} predictions",
                targets.len(),
                preds.len()
            )));
        }
        for (t, &p) in targets.iter().zip(&preds) {
            if self.value(p).shape() != t.shape() {
                return Err(DsrError::Dimension(format!(
                    "mse loss: prediction shape {:?} vs target shape {:?}",
                    self.value(p).shape(),
                    t.shape()
                )));
            }
        }
        let target_refs: Vec<&Tensor<T>> = targets.iter().collect();
        let pred_refs: Vec<&Tensor<T>> = preds.iter().map(|&p| self.value(p)).collect();
        let (loss, _) = energy::mse_obs_loss_grad(&target_refs, &pred_refs, false);
        let needs = preds.iter().any(|&p| self.needs(p));
        let id = self.push(
            Tensor::scalar(T::from_f64(loss.total)),
            needs,
            Op::Mse { targets, preds },
        );
        Ok((id, loss))
    }

    // -- backward ---------------------------------------------------------------

    /// Reverse pass from a scalar node. Each call computes its own gradient
    /// flow and then adds it into the persistent per-node gradients, so
    /// repeated calls accumulate (until [`Graph::zero_grads`] or `take_grad`
    /// clears them) without cross-contaminating each other.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(DsrError::Usage(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            // loss does not depend on any parameter; nothing to do
            return Ok(());
        }
        let mut flow: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        flow[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(gout) = flow[idx].take() else { continue };
            step_backward(&self.nodes[idx].op, &gout, &self.nodes[..idx], &mut flow)?;
            match &mut self.nodes[idx].grad {
                Some(g) => g.add_assign(&gout)?,
                slot @ None => *slot = Some(gout),
            }
        }
        Ok(())
    }
}

/// One node's contribution to its inputs' slots in the current pass's
/// gradient flow. `before` holds all nodes with smaller indices, which is
/// where every input lives.
fn step_backward<T: Real>(
    op: &Op<T>,
    gout: &Tensor<T>,
    before: &[Node<T>],
    flow: &mut [Option<Tensor<T>>],
) -> Result<()> {
    match op {
        Op::Leaf => Ok(()),
        Op::Affine { input, weights, bias } => {
            let (di, dw, db) = ops::affine_backward(
                &before[input.0].value,
                &before[weights.0].value,
                gout,
                before[input.0].needs_grad,
                before[weights.0].needs_grad,
                before[bias.0].needs_grad,
            )?;
            if let Some(d) = di {
                accumulate(before, flow, *input, d)?;
            }
            if let Some(d) = dw {
                accumulate(before, flow, *weights, d)?;
            }
            if let Some(d) = db {
                accumulate(before, flow, *bias, d)?;
            }
            Ok(())
        }
        Op::Conv3d { input, kernel, bias } => {
            let (di, dk, db) = ops::conv3d_backward(
                &before[input.0].value,
                &before[kernel.0].value,
                gout,
                before[input.0].needs_grad,
                before[kernel.0].needs_grad,
                before[bias.0].needs_grad,
            )?;
            if let Some(d) = di {
                accumulate(before, flow, *input, d)?;
            }
            if let Some(d) = dk {
                accumulate(before, flow, *kernel, d)?;
            }
            if let Some(d) = db {
                accumulate(before, flow, *bias, d)?;
            }
            Ok(())
        }
        Op::AvgPool3d { input } => {
            if before[input.0].needs_grad {
                let d = ops::avg_pool3d_backward(gout, before[input.0].value.shape())?;
                accumulate(before, flow, *input, d)?;
            }
            Ok(())
        }
        Op::Upsample3d { input, factor } => {
            if before[input.0].needs_grad {
                let d = ops::nearest_upsample3d_backward(gout, *factor, before[input.0].value.shape())?;
                accumulate(before, flow, *input, d)?;
            }
            Ok(())
        }
        Op::Activation { input, kind } => {
            if before[input.0].needs_grad {
                let x = &before[input.0].value;
                let mut d = Tensor::zeros(x.shape());
                for ((o, &xv), &gv) in d.data_mut().iter_mut().zip(x.data()).zip(gout.data()) {
                    *o = kind.derivative(xv) * gv;
                }
                accumulate(before, flow, *input, d)?;
            }
            Ok(())
        }
        Op::Add { lhs, rhs } => {
            if before[lhs.0].needs_grad {
                accumulate(before, flow, *lhs, gout.clone())?;
            }
            if before[rhs.0].needs_grad {
                accumulate(before, flow, *rhs, gout.clone())?;
            }
            Ok(())
        }
        Op::Scale { input, factor } => {
            if before[input.0].needs_grad {
                accumulate(before, flow, *input, gout.scale(*factor))?;
            }
            Ok(())
        }
        Op::ConcatChannels { lhs, rhs } => {
            let split = before[lhs.0].value.len();
            if before[lhs.0].needs_grad {
                let ls = before[lhs.0].value.shape().to_vec();
                let d = Tensor::new(ls, gout.data()[..split].to_vec())?;
                accumulate(before, flow, *lhs, d)?;
            }
            if before[rhs.0].needs_grad {
                let rs = before[rhs.0].value.shape().to_vec();
                let d = Tensor::new(rs, gout.data()[split..].to_vec())?;
                accumulate(before, flow, *rhs, d)?;
            }
            Ok(())
        }
        Op::EnergyScalar { targets, samples } => {
            let lam = gout.item().to_f64();
            let grads = {
                let cols: Vec<&[T]> = samples.iter().map(|&s| before[s.0].value.data()).collect();
                let (_, grads) = energy::scalar_rows_loss_grad(targets.data(), &cols, true);
                grads.expect("requested gradients")
            };
            for (&s, g) in samples.iter().zip(grads) {
                if before[s.0].needs_grad {
                    let shape = before[s.0].value.shape().to_vec();
                    let mut d = Tensor::new(shape, g)?;
                    if lam != 1.0 {
                        d = d.scale(T::from_f64(lam));
                    }
                    accumulate(before, flow, s, d)?;
                }
            }
            Ok(())
        }
        Op::EnergyVector { targets, samples } => {
            let lam = gout.item().to_f64();
            let grads = {
                let target_refs: Vec<&Tensor<T>> = targets.iter().collect();
                let sample_refs: Vec<Vec<&Tensor<T>>> = samples
                    .iter()
                    .map(|group| group.iter().map(|&s| &before[s.0].value).collect())
                    .collect();
                let (_, grads) = energy::vector_obs_loss_grad(&target_refs, &sample_refs, true);
                grads.expect("requested gradients")
            };
            for (group, group_grads) in samples.iter().zip(grads) {
                for (&s, mut d) in group.iter().zip(group_grads) {
                    if before[s.0].needs_grad {
                        if lam != 1.0 {
                            d = d.scale(T::from_f64(lam));
                        }
                        accumulate(before, flow, s, d)?;
                    }
                }
            }
            Ok(())
        }
        Op::Mse { targets, preds } => {
            let lam = gout.item().to_f64();
            let grads = {
                let target_refs: Vec<&Tensor<T>> = targets.iter().collect();
                let pred_refs: Vec<&Tensor<T>> = preds.iter().map(|&p| &before[p.0].value).collect();
                let (_, grads) = energy::mse_obs_loss_grad(&target_refs, &pred_refs, true);
                grads.expect("requested gradients")
            };
            for (&p, mut d) in preds.iter().zip(grads) {
                if before[p.0].needs_grad {
                    if lam != 1.0 {
                        d = d.scale(T::from_f64(lam));
                    }
                    accumulate(before, flow, p, d)?;
                }
            }
            Ok(())
        }
    }
}

fn accumulate<T: Real>(
    nodes: &[Node<T>],
    flow: &mut [Option<Tensor<T>>],
    id: NodeId,
    delta: Tensor<T>,
) -> Result<()> {
    debug_assert!(nodes[id.0].needs_grad, "gradient routed to a non-tracked node");
    match &mut flow[id.0] {
        Some(g) => g.add_assign(&delta),
        slot @ None => {
            *slot = Some(delta);
            Ok(())
        }
    }
}
