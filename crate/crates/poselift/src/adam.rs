//! Adam with bias correction over named parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::HasParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

/// One optimizer step. Every trainable tensor in `params` must have a
/// same-named entry in `grads`; moments are allocated lazily per key.
///
/// m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
/// p ← p − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
pub fn adam_step(
    params: &mut dyn HasParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
) -> Result<()> {
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let (lr, b1, b2, eps) = (state.lr, state.beta1, state.beta2, state.eps);
    let moments = &mut state.moments;
    let mut err = None;
    params.visit_mut("", &mut |name, tensor, trainable| {
        if !trainable || err.is_some() {
            return;
        }
        let Some(grad) = grads.get(name) else {
            err = Some(Error::MissingGradient(name.to_string()));
            return;
        };
        if grad.shape() != tensor.shape() {
            err = Some(Error::ShapeMismatch {
                op: "adam_step",
                lhs: tensor.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
            return;
        }
        let (m, v) = moments.entry(name.to_string()).or_insert_with(|| {
            (
                Tensor::zeros(tensor.shape().to_vec()),
                Tensor::zeros(tensor.shape().to_vec()),
            )
        });
        for ((p, g), (m, v)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Linear;

    fn scalar_param(value: f64) -> Linear {
        Linear {
            w: Tensor::matrix(1, 1, vec![value]).unwrap(),
            b: Tensor::vector(vec![0.0]),
        }
    }

    fn grads_for(w: f64, b: f64) -> BTreeMap<String, Tensor> {
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::matrix(1, 1, vec![w]).unwrap());
        g.insert("b".to_string(), Tensor::vector(vec![b]));
        g
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected Adam: first step is ~ -lr * sign(g)
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(0.1);
        adam_step(&mut p, &grads_for(0.5, 0.0), &mut s).unwrap();
        let delta = p.w.data()[0] - 1.0;
        assert!((delta + 0.1).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn zero_grad_zero_moments_leaves_params() {
        let mut p = scalar_param(3.25);
        let before = p.clone();
        let mut s = AdamState::new(0.1);
        adam_step(&mut p, &grads_for(0.0, 0.0), &mut s).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn missing_gradient_key_is_an_error() {
        let mut p = scalar_param(1.0);
        let mut s = AdamState::new(0.1);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::matrix(1, 1, vec![0.5]).unwrap());
        let err = adam_step(&mut p, &grads, &mut s).unwrap_err();
        assert!(matches!(err, Error::MissingGradient(name) if name == "b"));
    }

    #[test]
    fn ten_step_quadratic_matches_transcription() {
        // minimize f(w) = (w - 2)^2, grad = 2(w - 2); compare against an
        // independent transcription of the update equations.
        let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
        let mut expect = 5.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut trajectory = Vec::new();
        for t in 1..=10 {
            let g = 2.0 * (expect - 2.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let m_hat = m / (1.0 - b1.powi(t));
            let v_hat = v / (1.0 - b2.powi(t));
            expect -= lr * m_hat / (v_hat.sqrt() + eps);
            trajectory.push(expect);
        }

        let mut p = scalar_param(5.0);
        let mut s = AdamState::new(lr);
        for want in trajectory {
            let g = 2.0 * (p.w.data()[0] - 2.0);
            adam_step(&mut p, &grads_for(g, 0.0), &mut s).unwrap();
            assert!((p.w.data()[0] - want).abs() < 1e-12);
        }
    }
}
