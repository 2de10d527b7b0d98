//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One Adam update of `params` in place. Nothing is modified if any gradient
/// is non-finite.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TensorError::Contract(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TensorError::Numeric { op: "adam" });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over a whole [`ParamStore`], keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            states: BTreeMap::new(),
        }
    }

    /// Applies the accumulated gradients of every parameter, then zeroes them.
    /// On a non-finite gradient no parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for (name, t) in store.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(TensorError::Contract(format!(
                    "non-finite gradient in {name}; step aborted"
                )));
            }
        }
        for (name, t) in store.iter_mut() {
            let Some(grad) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(grad.len()));
            adam_step(t.data_mut(), &grad, state, &self.cfg)?;
            t.zero_grad();
        }
        Ok(())
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.4, 0.2];
        st.v = vec![0.1, 0.1];
        let m0 = st.m.clone();
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        // params move only through the stale momentum, never with zero state
        let mut p2 = vec![1.5, -2.0];
        let mut fresh = AdamState::new(2);
        adam_step(&mut p2, &[0.0, 0.0], &mut fresh, &cfg).unwrap();
        assert_eq!(p2, vec![1.5, -2.0]);
        assert_eq!(st.m[0], cfg.beta1 * m0[0]);
        assert_eq!(st.v[1], cfg.beta2 * 0.1);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn constant_gradient_moves_against_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            ..Default::default()
        };
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2);
        for _ in 0..100 {
            adam_step(&mut p, &[2.0, -0.5], &mut st, &cfg).unwrap();
        }
        assert!(p[0] < -0.5 && p[1] > 0.5, "{p:?}");
    }

    #[test]
    fn quadratic_converges_to_minimum() {
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        for _ in 0..500 {
            let g = 2.0 * (p[0] - 3.0);
            adam_step(&mut p, &[g], &mut st, &cfg).unwrap();
        }
        assert!((p[0] - 3.0).abs() < 0.05, "{}", p[0]);
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(2);
        assert!(adam_step(&mut p, &[0.1, f64::NAN], &mut st, &cfg).is_err());
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(st.step, 0);
    }
}
