//! Cloud-side adaptation: replay buffer, confidence-weighted entropy
//! minimization of the foundation model, and distillation into the edge
//! model.

mod buffer;
mod engine;
pub mod loss;

pub use crate::nn::{AffineLayer, AffineParamSet};
pub use buffer::{ReplayBuffer, DEFAULT_BUFFER_CAPACITY};
pub use engine::{
    adapt_edge, adapt_foundation, confidence_weights, pseudo_labels, teacher_targets,
    weighted_entropy_value, AdaptConfig, AdaptEngine, EdgeStep, FoundationStep, StepOutcome,
};
pub use loss::{cross_entropy_loss, kl_divergence, sample_weight};
