//! Minimal dense-tensor math with reverse-mode automatic differentiation.
//!
//! Values are fp64 throughout. A [`Tape`] records ops linearly; parameters
//! live in a [`ParamStore`] and are bound onto a fresh tape for each step.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use optim::{adam_step, Adam, AdamConfig, AdamState};
pub use params::{Bindings, ParamStore};
pub use tape::{Tape, Var, BCE_EPS, LAYERNORM_EPS};
pub use tensor::Tensor;
