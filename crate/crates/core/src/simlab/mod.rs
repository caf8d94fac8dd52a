//! Simulation studies on synthetic single-index data, plus desk-scale
//! robustness and ablation protocols for the volumetric pipeline.
//!
//! The generative law is `y = g(beta' (x + eps))`: noise enters the
//! inputs *before* the nonlinearity, so the training responses carry
//! information about `g` beyond the clean input domain. The studies
//! train the distributional estimator (energy loss over a fan of
//! noised forward passes) and an L2 baseline on the same data, then
//! compare both against a Monte-Carlo oracle on a grid that extends
//! well past the training domain.

mod compare;
mod gen;
mod pipeline;

pub use compare::{
    dsr_predict, l2_predict, run_comparison, EstimatorBand, MedianMse, RunOutcome, RunReport,
};
pub use gen::{
    eval_grid, g_eval, gen_dataset, gen_highdim, gen_lowdim, make_ground_truth, oracle_mean,
    oracle_mean_with, sample_dataset, GName, GroundTruth, SimConfig, SimDataset,
};
pub use pipeline::{
    ablation_suite, identity_mse, model_test_mse, robustness_suite, AblationConfig,
    AblationVariant, RobustnessConfig, RobustnessReport, SigmaOutcome, SplitOutcome,
};
