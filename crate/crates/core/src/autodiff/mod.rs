//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! Graphs are built eagerly (define-by-run): each op computes its value when
//! called and records what its adjoint needs. A graph is used for one
//! forward/backward pass and then dropped.

pub mod catalog;
mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_gradient, evaluate, finite_diff_check, floored_relative_error, max_relative_error, numeric_gradient};
pub use graph::{AutodiffError, Axis, Gradients, Graph, GruVars, OpKind, Result, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
