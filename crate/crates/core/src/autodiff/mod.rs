//! Reverse-mode differentiation and the Adam update rule.
//!
//! The same engine differentiates with respect to model parameters during
//! training and with respect to variable values during inference.

mod adam;
mod tape;

pub use adam::{Adam, AdamConfig, Diverged};
pub use tape::{Gradients, Tape, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("domain violation in `{op}` at node {node}")]
    Domain { node: usize, op: &'static str },
    #[error("backward requested on a tape whose leaves changed since the last evaluate")]
    NotEvaluated,
    #[error("node {0} is not a leaf")]
    NotALeaf(usize),
    #[error("leaf {node} holds {expected} values, got {got}")]
    LeafShape {
        node: usize,
        expected: usize,
        got: usize,
    },
    #[error("backward root {node} has {len} components, expected a scalar")]
    NonScalarRoot { node: usize, len: usize },
}
