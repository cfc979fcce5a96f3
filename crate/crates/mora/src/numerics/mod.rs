//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major value type. [`Graph`] is a tape: every
//! forward operation appends a node holding its output and a backward rule,
//! and [`Graph::backward`] replays the tape in reverse, accumulating
//! gradients into the [`Param`] leaves that requested them.
//! [`finite_diff_check`] is the independent central-difference oracle used
//! to validate every backward rule.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_error, finite_diff_params};
pub use graph::{Graph, NodeId};
pub use tensor::{NamedParam, Param, Tensor};
