//! Metrics and experiment drivers.

pub mod experiments;
pub mod metrics;

pub use experiments::{
    ablate_confidence, ablate_weight_scale, sweep_labeled, uchs_loop, ExperimentConfig, ResultTable,
    UnlabeledSource,
};
pub use metrics::{accuracy_at_quantile, position_errors, EvalReport};
