//! Dense numerical substrate: matrices, layer primitives with explicit
//! backward passes, losses, Adam, and parameter checkpoints.

mod adam;
mod checkpoint;
mod matrix;
mod ops;

use thiserror::Error;

pub use adam::{adam_step, zero_grads, AdamConfig, ParamBlock};
pub use checkpoint::Checkpoint;
pub use matrix::{dot, Matrix};
pub use ops::{
    linear_backward, linear_backward_accumulate, linear_forward, log_sum_exp, mse, sigmoid,
    softmax, weighted_cross_entropy, Activation, LinearCache,
};

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("{op}: shape mismatch on `{operand}` (expected {expected}, found {found})")]
    Shape {
        op: &'static str,
        operand: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("contract violation: {0}")]
    Contract(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
