use serde::{Deserialize, Serialize};

use crate::diffcore::{Activation, Graph, NodeId};
use crate::{DsrError, Real, Result};

use super::LayerPlan;

/// Velocity volumes carry the three components as channels.
pub(crate) const FIELD_CHANNELS: usize = 3;

/// 3-D U-Net over `[3, s, s, s]` volumes.
///
/// Encoder: `depth + 1` conv+leaky-relu stages with factor-2 average pooling
/// between them and channel doubling (`base_channels * 2^i`). Decoder per
/// level: nearest-neighbor upsample, a conv halving the channels, skip
/// concatenation, and a merge conv. The head is a 1x1x1 conv back to three
/// channels, added onto the input (global residual), so the network learns a
/// correction field rather than the field itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNet3dSpec {
    /// Number of pooling steps; the input side must be divisible by 2^depth.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Side of the cubic conv kernels (odd).
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_leaky_alpha")]
    pub leaky_alpha: f64,
}

fn default_depth() -> usize {
    3
}

fn default_base_channels() -> usize {
    16
}

fn default_kernel() -> usize {
    3
}

fn default_leaky_alpha() -> f64 {
    0.01
}

impl Default for UNet3dSpec {
    fn default() -> Self {
        UNet3dSpec {
            depth: default_depth(),
            base_channels: default_base_channels(),
            kernel: default_kernel(),
            leaky_alpha: default_leaky_alpha(),
        }
    }
}

impl UNet3dSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(DsrError::Config("unet depth must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(DsrError::Config("unet base_channels must be at least 1".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(DsrError::Config(format!(
                "unet kernel must be odd and positive, got {}",
                self.kernel
            )));
        }
        if !(self.leaky_alpha.is_finite() && self.leaky_alpha >= 0.0) {
            return Err(DsrError::Config(format!(
                "unet leaky_alpha must be finite and non-negative, got {}",
                self.leaky_alpha
            )));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Tensor layout: encoder stages shallow to deep, decoder stages deep to
    /// shallow, head last.
    pub(crate) fn layer_plan(&self) -> Vec<LayerPlan> {
        let k = self.kernel;
        let mut plan = Vec::new();
        let mut conv = |name: String, c_out: usize, c_in: usize, side: usize| {
            plan.push(LayerPlan {
                name: format!("{name}.w"),
                shape: vec![c_out, c_in, side, side, side],
                fan_in: c_in * side * side * side,
            });
            plan.push(LayerPlan {
                name: format!("{name}.b"),
                shape: vec![c_out],
                fan_in: c_in * side * side * side,
            });
        };
        for i in 0..=self.depth {
            let c_in = if i == 0 { FIELD_CHANNELS } else { self.channels(i - 1) };
            conv(format!("enc{i}"), self.channels(i), c_in, k);
        }
        for i in (0..self.depth).rev() {
            conv(format!("up{i}"), self.channels(i), self.channels(i + 1), k);
            conv(format!("merge{i}"), self.channels(i), 2 * self.channels(i), k);
        }
        conv("head".into(), FIELD_CHANNELS, self.base_channels, 1);
        plan
    }

    pub(crate) fn head_fan_in(&self) -> usize {
        self.base_channels
    }
}

/// Forward pass over a `[3, s, s, s]` node; returns a node of the same shape.
pub(crate) fn forward<T: Real>(
    spec: &UNet3dSpec,
    g: &mut Graph<T>,
    ids: &[NodeId],
    input: NodeId,
) -> Result<NodeId> {
    let shape = g.value(input).shape().to_vec();
    if shape.len() != 4 || shape[0] != FIELD_CHANNELS || shape[1] != shape[2] || shape[2] != shape[3] {
        return Err(DsrError::Dimension(format!(
            "unet forward expects [3, s, s, s], got {shape:?}"
        )));
    }
    let side = shape[1];
    let block = 1usize << spec.depth;
    if side % block != 0 || side / block == 0 {
        return Err(DsrError::Config(format!(
            "unet with depth {} needs the input side divisible by {block}; got side {side}",
            spec.depth
        )));
    }
    let leaky = Activation::LeakyRelu { alpha: spec.leaky_alpha };

    // encoder; ids come in (w, b) pairs in layer_plan order
    let mut idx = 0;
    let mut take = || {
        let pair = (ids[idx], ids[idx + 1]);
        idx += 2;
        pair
    };
    let mut x = input;
    let mut skips = Vec::with_capacity(spec.depth);
    for i in 0..=spec.depth {
        if i > 0 {
            x = g.avg_pool3d(x)?;
        }
        let (w, b) = take();
        x = g.conv3d(x, w, b)?;
        x = g.activation(x, leaky)?;
        if i < spec.depth {
            skips.push(x);
        }
    }

    // decoder
    for i in (0..spec.depth).rev() {
        x = g.nearest_upsample3d(x, 2)?;
        let (w, b) = take();
        x = g.conv3d(x, w, b)?;
        x = g.activation(x, leaky)?;
        x = g.concat_channels(x, skips[i])?;
        let (w, b) = take();
        x = g.conv3d(x, w, b)?;
        x = g.activation(x, leaky)?;
    }

    // 1x1x1 head, then the global residual connection
    let (w, b) = take();
    let correction = g.conv3d(x, w, b)?;
    g.add(input, correction)
}
