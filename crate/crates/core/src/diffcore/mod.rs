//! Dense tensors, reverse-mode automatic differentiation, gradient checking,
//! and the binary tensor file format.
//!
//! The autodiff engine is a tape: every operation appends a node holding its
//! output value and the indices of its inputs, so node indices are already a
//! topological order. `backward` walks the tape once in reverse, accumulating
//! gradients only into nodes that (transitively) require them. The op set is
//! exactly what the networks in this crate need — affine maps, 3-D
//! convolution/pooling/upsampling, pointwise activations, concatenation, and
//! fused loss heads with hand-derived gradients.

mod gradcheck;
mod graph;
pub mod io;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, grad_check_pair, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use ops::{avg_pool3d, conv3d, nearest_upsample3d, Activation};
pub use tensor::Tensor;
