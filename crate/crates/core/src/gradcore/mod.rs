//! Dense `f64` numerics with hand-derived backward passes.
//!
//! The layer set is closed (affine, ReLU/GeLU/SwiGLU, softmax cross-entropy),
//! so every layer records what it needs during a forward pass and exposes an
//! explicit backward. [`check`] verifies those against central differences.

pub mod check;
mod layers;
mod loss;
mod matrix;

pub use check::{finite_difference_check, GradCheckReport, Objective, TensorCheck};
pub use layers::{activation_backward, activation_forward, linear_forward, ActivationKind, Layer, LayerParams, Sequential};
pub(crate) use layers::sigmoid;
pub use loss::{argmax, softmax, softmax_cross_entropy};
pub use matrix::{dot, Matrix};
