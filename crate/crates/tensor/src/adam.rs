use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            config,
        }
    }
}

/// One bias-corrected Adam update of `params` in place. The step is rejected
/// (and nothing is modified) if any gradient is non-finite.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(TensorError::StateMismatch {
            state: state.m.len(),
            params: params.len(),
        });
    }
    if grads.len() != params.len() {
        return Err(TensorError::StateMismatch {
            state: grads.len(),
            params: params.len(),
        });
    }
    if let Some((index, &value)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(TensorError::NonFiniteGradient { index, value });
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + epsilon);
    }
    Ok(())
}

/// Adam over every tensor of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        Adam {
            states: params.iter().map(|(_, t)| AdamState::new(t.len(), config)).collect(),
        }
    }

    /// Applies the accumulated gradients and clears them. Tensors without a
    /// gradient are stepped with a zero gradient. All gradients are checked
    /// before any parameter is modified.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let mut offset = 0;
        for i in 0..params.len() {
            let t = params.tensor(i);
            if let Some(g) = t.grad() {
                if let Some((j, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient { index: offset + j, value });
                }
            }
            offset += t.len();
        }
        for (i, state) in self.states.iter_mut().enumerate() {
            let t = params.tensor_mut(i);
            let g = t.take_grad().unwrap_or_else(|| vec![0.0; t.len()]);
            adam_step(state, t.data_mut(), &g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_increments_t() {
        let mut s = AdamState::new(3, AdamConfig::new(0.1, 0.9, 0.999));
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut s, &mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_unit_step_moves_by_lr() {
        let mut s = AdamState::new(1, AdamConfig::new(0.1, 0.9, 0.999));
        let mut p = vec![0.0];
        adam_step(&mut s, &mut p, &[1.0]).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_rejected_without_mutation() {
        let mut s = AdamState::new(3, AdamConfig::new(0.1, 0.9, 0.999));
        let mut p = vec![1.0, 2.0, 3.0];
        let err = adam_step(&mut s, &mut p, &[0.0, f64::NAN, 1.0]).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { index: 1, .. }));
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        assert_eq!(s.t, 0);
    }

    #[test]
    fn state_mismatch_rejected() {
        let mut s = AdamState::new(2, AdamConfig::new(0.1, 0.9, 0.999));
        assert!(adam_step(&mut s, &mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
