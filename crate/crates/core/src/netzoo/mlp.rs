use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Graph, NodeId, Tensor};
use crate::{DsrError, Real, Result};

use super::LayerPlan;

/// MLP with a rank-1 first layer: the input is linearly projected to a single
/// scalar (no bias, no activation) before the nonlinear stack. The projection
/// weights play the role of input-combination coefficients and are readable
/// via `extract_beta`; the rest of the network learns the 1-D link function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Relu
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(DsrError::Config("mlp input_dim must be at least 1".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(DsrError::Config("mlp hidden widths must be at least 1".into()));
        }
        Ok(())
    }

    /// Tensor layout: projection, then (w, b) per hidden layer, then the head.
    pub(crate) fn layer_plan(&self) -> Vec<LayerPlan> {
        let mut plan = vec![LayerPlan {
            name: "projection.w".into(),
            shape: vec![self.input_dim, 1],
            fan_in: self.input_dim,
        }];
        let mut width = 1usize;
        for (i, &h) in self.hidden.iter().enumerate() {
            plan.push(LayerPlan {
                name: format!("dense{i}.w"),
                shape: vec![width, h],
                fan_in: width,
            });
            plan.push(LayerPlan {
                name: format!("dense{i}.b"),
                shape: vec![h],
                fan_in: width,
            });
            width = h;
        }
        plan.push(LayerPlan {
            name: super::HEAD_WEIGHT.into(),
            shape: vec![width, 1],
            fan_in: width,
        });
        plan.push(LayerPlan {
            name: super::HEAD_BIAS.into(),
            shape: vec![1],
            fan_in: width,
        });
        plan
    }

    pub(crate) fn head_fan_in(&self) -> usize {
        self.hidden.last().copied().unwrap_or(1)
    }
}

/// Forward pass over a `[n, input_dim]` batch; returns a `[n, 1]` node.
pub(crate) fn forward<T: Real>(
    spec: &MlpSpec,
    g: &mut Graph<T>,
    ids: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    let shape = g.value(input).shape();
    if shape.len() != 2 || shape[1] != spec.input_dim {
        return Err(DsrError::Dimension(format!(
            "mlp forward expects [n, {}], got {:?}",
            spec.input_dim, shape
        )));
    }
    let no_bias = g.constant(Tensor::zeros(&[1]));
    let mut x = g.affine(input, ids[0], no_bias)?;
    let mut idx = 1;
    for _ in &spec.hidden {
        x = g.affine(x, ids[idx], ids[idx + 1])?;
        x = g.activation(x, spec.activation)?;
        idx += 2;
    }
    g.affine(x, ids[idx], ids[idx + 1])
}
