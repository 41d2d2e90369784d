//! Saliency scores, global bottom-fraction mask selection and the four
//! strategy drivers (training- or initialization-based, magnitude or
//! gradient-sensitive).
//!
//! Gradient-sensitive scores use the mean over examples of the absolute
//! per-example gradient, so opposite-sign contributions never cancel.

mod saliency;
mod select;
mod strategy;

pub use saliency::{
    average_abs_gradient, compute_saliency, saliency_from_gradients, Criterion, CriterionKind,
    Reduction, SaliencyMap, SaliencyOptions,
};
pub use select::{prune_count, select_mask};
pub use strategy::{
    run_init_based, run_strategy, run_training_based, run_training_based_from, IterationRecord,
    LayerSnapshot, RunOptions, StrategySpec, Timing,
};
