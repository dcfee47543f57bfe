//! Dense tensors and reverse-mode differentiation.
//!
//! A [`Graph`] records each operation as it is evaluated. Inputs are either
//! frozen constants (shared, never differentiated) or trainable parameters.
//! [`Graph::backward`] walks the nodes in reverse creation order and applies
//! one vector-Jacobian rule per op kind; frozen branches are skipped entirely.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{central_difference, grad_check, relative_error};
pub use graph::{Gradients, Graph, OpKind, Var};
pub use tensor::{Real, Tensor};
