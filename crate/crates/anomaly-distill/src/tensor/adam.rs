//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use super::{Result, TensorError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyperparams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyperparams {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyperparams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState<E> {
    pub m: Vec<E>,
    pub v: Vec<E>,
}

/// Optimizer over named parameter buffers. Moments are keyed by name in a
/// sorted map so iteration (and checkpoint serialization) is deterministic.
pub struct Adam<E: Scalar> {
    pub hp: AdamHyperparams,
    t: u64,
    states: BTreeMap<String, AdamState<E>>,
}

impl<E: Scalar> Adam<E> {
    pub fn new(hp: AdamHyperparams) -> Self {
        Adam {
            hp,
            t: 0,
            states: BTreeMap::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn set_t(&mut self, t: u64) {
        self.t = t;
    }

    pub fn states(&self) -> impl Iterator<Item = (&String, &AdamState<E>)> {
        self.states.iter()
    }

    pub fn insert_state(&mut self, name: String, state: AdamState<E>) {
        self.states.insert(name, state);
    }

    /// One update step over (name, parameter, gradient) triples. A `None`
    /// gradient means the loss did not reach the parameter; moments still
    /// decay toward zero. Any non-finite gradient aborts the whole step
    /// before anything is mutated.
    pub fn step(&mut self, mut pairs: Vec<(&str, &mut [E], Option<&[E]>)>) -> Result<()> {
        for (name, param, grad) in pairs.iter() {
            if let Some(g) = grad {
                if g.len() != param.len() {
                    return Err(TensorError::ShapeMismatch(format!(
                        "adam_step: gradient length {} != parameter length {} for {name}",
                        g.len(),
                        param.len()
                    )));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFinite(format!("gradient of {name}")));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.hp.beta2.powi(self.t as i32);
        let lr = E::from_f64(self.hp.lr);
        let b1 = E::from_f64(self.hp.beta1);
        let b2 = E::from_f64(self.hp.beta2);
        let one_m_b1 = E::ONE - b1;
        let one_m_b2 = E::ONE - b2;
        let inv_bc1 = E::from_f64(1.0 / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        let eps = E::from_f64(self.hp.eps);

        for (name, param, grad) in pairs.iter_mut() {
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState {
                    m: vec![E::ZERO; param.len()],
                    v: vec![E::ZERO; param.len()],
                });
            debug_assert_eq!(state.m.len(), param.len());
            for i in 0..param.len() {
                let g = grad.map_or(E::ZERO, |g| g[i]);
                state.m[i] = b1 * state.m[i] + one_m_b1 * g;
                state.v[i] = b2 * state.v[i] + one_m_b2 * g * g;
                let m_hat = state.m[i] * inv_bc1;
                let v_hat = state.v[i] * inv_bc2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
