//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values live in [`Tensor`]; differentiable computations are recorded on a
//! [`Tape`] through [`Var`] handles. Gradients are themselves recorded on the
//! tape when requested with [`Tape::grad_graph`], so a gradient can appear
//! inside a larger objective and be differentiated again by
//! [`Tape::backward`]. This is what lets an integrator that calls `∇H` stay
//! differentiable end to end.

mod broadcast;
mod error;
pub mod gradcheck;
pub mod linalg;
mod ops;
mod tape;
mod tensor;

pub use error::{AdError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
