//! Adam with bias correction, one state per named parameter block.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamState {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            hyper,
        }
    }
}

/// One Adam update. `block` names the parameter block in error messages.
pub fn adam_step(
    block: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "adam param/grad length");
    assert_eq!(params.len(), state.m.len(), "adam state length");
    if grads.iter().any(|g| g.is_nan()) {
        return Err(Error::NanGradient(block.to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_fixed_but_increments_step() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2, AdamHyper::default());
        adam_step("test", &mut p, &[0.0, 0.0], &mut st).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![0.0, 0.0];
        let mut st = AdamState::new(2, AdamHyper::default());
        adam_step("test", &mut p, &[0.5, -0.25], &mut st).unwrap();
        // bias-corrected m_hat/sqrt(v_hat) = g/|g| up to eps
        assert!((p[0] + 1e-3).abs() < 1e-9, "{}", p[0]);
        assert!((p[1] - 1e-3).abs() < 1e-9, "{}", p[1]);
    }

    #[test]
    fn nan_gradient_names_the_block() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1, AdamHyper::default());
        let err = adam_step("encoder.weight", &mut p, &[f64::NAN], &mut st).unwrap_err();
        assert!(err.to_string().contains("encoder.weight"));
    }

    #[test]
    fn hundred_steps_shrink_a_quadratic() {
        // f(w) = w^2, grad = 2w, from w = 1 with lr = 0.1
        let mut w = vec![1.0];
        let mut st = AdamState::new(
            1,
            AdamHyper {
                lr: 0.1,
                ..AdamHyper::default()
            },
        );
        for _ in 0..100 {
            let g = vec![2.0 * w[0]];
            adam_step("w", &mut w, &g, &mut st).unwrap();
        }
        assert!(w[0].abs() < 0.1, "w = {}", w[0]);
        assert_eq!(st.step, 100);
    }
}
