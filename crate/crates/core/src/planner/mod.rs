//! The trainable strategy planner: features, policy and supervised
//! initialization.

pub mod features;
pub mod policy;
pub mod sft;

pub use features::{encode_features, Block, FeatureLayout, FeatureVector};
pub use policy::{
    accumulate_log_prob_gradient, argmax, log_prob_gradient, policy_distribution, select_strategy, softmax, Gradient,
    PolicyParameters, SelectionMode,
};

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint was written for feature layout {found}, expected {expected}")]
    LayoutMismatch { expected: String, found: String },
    #[error("strategy index {0} out of range")]
    InvalidLabel(usize),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("corpus: {0}")]
    Corpus(String),
}
