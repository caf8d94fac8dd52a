//! Optimization loops: noise-injected distributional training, the
//! two-phase probe-then-finetune schedule, and the L2 baseline.
//!
//! All training here follows one pattern: draw `m` independent noise
//! tensors per observation, push each noised input through the model,
//! and minimize a loss over the resulting prediction fan — the energy
//! score for distributional training, plain MSE (with `m = 1`, no
//! noise) for the baseline. Everything is deterministic given the
//! config seed.

mod adam;
mod config;
mod loops;

pub use adam::{adam_step, AdamState};
pub use config::{FinetuneConfig, LossKind, NoiseSpec, TrainConfig, TrainReport};
pub use loops::{
    evaluate_pairs_loss, finetune_lpft, linear_probe, noised_rows, noised_volume, pretrain,
    train_l2_baseline, train_mlp,
};
