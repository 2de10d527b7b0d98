//! Two-layer affine heads ending in a single logit.
//!
//! Shared by the task classifier, the attribute adversaries and the
//! per-group classifiers of domain-independent training.

use fairvit_autodiff::{Bindings, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::vit::Activation;

pub const INIT_STD: f64 = 0.02;

pub fn normal_tensor<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape matches data")
}

/// Registers `{prefix}.fc1.{weight,bias}` and `{prefix}.fc2.{weight,bias}`.
pub fn init_head<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(
        format!("{prefix}.fc1.weight"),
        normal_tensor(rng, &[input, hidden], INIT_STD),
    )?;
    store.insert(format!("{prefix}.fc1.bias"), Tensor::zeros(&[hidden]))?;
    store.insert(
        format!("{prefix}.fc2.weight"),
        normal_tensor(rng, &[hidden, 1], INIT_STD),
    )?;
    store.insert(format!("{prefix}.fc2.bias"), Tensor::zeros(&[1]))?;
    Ok(())
}

/// Pre-sigmoid score `[B]` for features `[B, input]`.
pub fn head_logit(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    x: Var,
    act: Activation,
) -> Result<Var> {
    let h = tape.linear(
        x,
        b.get(&format!("{prefix}.fc1.weight"))?,
        b.get(&format!("{prefix}.fc1.bias"))?,
    )?;
    let h = act.apply(tape, h)?;
    let z = tape.linear(
        h,
        b.get(&format!("{prefix}.fc2.weight"))?,
        b.get(&format!("{prefix}.fc2.bias"))?,
    )?;
    let rows = tape.shape(z)[0];
    Ok(tape.reshape(z, &[rows])?)
}

/// Probability `[B]` in (0,1).
pub fn head_prob(
    tape: &mut Tape,
    b: &Bindings,
    prefix: &str,
    x: Var,
    act: Activation,
) -> Result<Var> {
    let z = head_logit(tape, b, prefix, x, act)?;
    Ok(tape.sigmoid(z)?)
}
