//! Adam optimizer with bias correction.

use std::collections::HashMap;

use thiserror::Error;

use crate::params::{GradAccum, ParamStore};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter `{name}` at flat index {index}")]
    NonFiniteGrad { name: String, index: usize },
}

/// Per-tensor Adam moment state.
#[derive(Clone)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    moments: HashMap<usize, Moments>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from accumulated gradients. The whole step is
    /// rejected if any gradient is non-finite, reporting the offending
    /// parameter; parameters and moments are untouched in that case.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradAccum) -> Result<(), OptimError> {
        for (idx, g) in grads.iter() {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(OptimError::NonFiniteGrad {
                    name: store.name(idx).to_string(),
                    index: i,
                });
            }
        }
        self.step += 1;
        for (idx, g) in grads.iter() {
            let n = store.tensor(idx).numel();
            let mom = self.moments.entry(idx).or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            adam_update(
                store.tensor_mut(idx).data_mut(),
                g,
                &mut mom.m,
                &mut mom.v,
                self.step,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            );
        }
        Ok(())
    }
}

/// The scalar Adam rule, exposed for direct testing.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
) {
    assert_eq!(param.len(), grad.len(), "adam shape mismatch");
    assert_eq!(param.len(), m.len());
    assert_eq!(param.len(), v.len());
    assert!(step >= 1);
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..param.len() {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let mut p = vec![1.0f32, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, a single step with constant gradient g moves
        // the parameter by ~lr * sign(g).
        let mut p = vec![0.0f32];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut p, &[3.7], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] + 0.01).abs() < 1e-4, "expected ~-lr, got {}", p[0]);
    }

    #[test]
    fn quadratic_bowl_is_monotone() {
        // f(w) = w^2 from w=1 at lr=1e-2: loss must never increase.
        let mut w = 1.0f32;
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let mut last = w * w;
        for step in 1..=100u64 {
            let grad = 2.0 * w;
            let mut p = vec![w];
            adam_update(&mut p, &[grad], &mut m, &mut v, step, 1e-2, 0.9, 0.999, 1e-8);
            w = p[0];
            let loss = w * w;
            assert!(loss <= last + 1e-7, "loss increased at step {step}: {last} -> {loss}");
            last = loss;
        }
        assert!(last < 1.0);
    }

    #[test]
    fn non_finite_grad_rejects_whole_step() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::full(vec![2], 1.0));
        let mut adam = Adam::new(0.1);
        let mut grads = GradAccum::new();
        grads.add(0, 2, &[1.0, f32::NAN]);
        let err = adam.step(&mut store, &grads).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('w') && msg.contains("index 1"), "{msg}");
        assert_eq!(store.get("w").data(), &[1.0, 1.0]);
        assert_eq!(adam.step_count(), 0);
    }
}
