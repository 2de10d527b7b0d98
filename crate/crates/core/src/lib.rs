//! Vision transformer training with fairness metrics and targeted
//! query-activation debiasing.

pub mod baselines;
pub mod data;
pub mod debias;
pub mod error;
pub mod harness;
pub mod head;
pub mod inspect;
pub mod metrics;
pub mod vit;

pub use error::{Error, Result};
