//! Batch normalization over the feature axis, with running statistics for
//! eval mode and a full backward pass through the batch statistics.

use crate::error::{Error, Result};
use crate::nn::matrix::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub gamma: Vec<f64>,
    pub beta_shift: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Retention factor for the running statistics, in (0, 1).
    pub momentum: f64,
    pub epsilon: f64,
}

/// Values cached by the train-mode forward pass, needed by the backward pass.
#[derive(Debug, Clone)]
pub struct BatchNormCache {
    pub x_hat: DenseMatrix,
    pub inv_std: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta_shift: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum: 0.99,
            epsilon: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }
}

/// Train-mode forward: normalize by the batch mean and (biased) variance,
/// update the running statistics, and return the cache for the backward pass.
pub fn batch_norm_train(
    state: &mut BatchNormState,
    x: &DenseMatrix,
) -> Result<(DenseMatrix, BatchNormCache)> {
    let (n, f) = x.shape();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    assert_eq!(f, state.dim(), "batch_norm feature dim");

    let mut mean = vec![0.0; f];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; f];
    for i in 0..n {
        for (j, &v) in x.row(i).iter().enumerate() {
            let d = v - mean[j];
            var[j] += d * d;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }

    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + state.epsilon).sqrt()).collect();
    let mut x_hat = x.clone();
    for i in 0..n {
        for (j, v) in x_hat.row_mut(i).iter_mut().enumerate() {
            *v = (*v - mean[j]) * inv_std[j];
        }
    }
    let mut y = x_hat.clone();
    for i in 0..n {
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            *v = state.gamma[j] * *v + state.beta_shift[j];
        }
    }

    let m = state.momentum;
    for j in 0..f {
        state.running_mean[j] = m * state.running_mean[j] + (1.0 - m) * mean[j];
        state.running_var[j] = m * state.running_var[j] + (1.0 - m) * var[j];
    }

    Ok((y, BatchNormCache { x_hat, inv_std }))
}

/// Eval-mode forward: normalize by the running statistics.
pub fn batch_norm_eval(state: &BatchNormState, x: &DenseMatrix) -> DenseMatrix {
    let (n, f) = x.shape();
    assert_eq!(f, state.dim(), "batch_norm feature dim");
    let mut y = x.clone();
    for i in 0..n {
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            let x_hat = (*v - state.running_mean[j])
                / (state.running_var[j] + state.epsilon).sqrt();
            *v = state.gamma[j] * x_hat + state.beta_shift[j];
        }
    }
    y
}

/// Backward through the train-mode forward, including the dependence of the
/// batch statistics on the input:
///
/// `dx_i = inv_std/N * (N*dxh_i - sum_j dxh_j - xh_i * sum_j dxh_j*xh_j)`
pub fn batch_norm_backward(
    state: &BatchNormState,
    cache: &BatchNormCache,
    grad_out: &DenseMatrix,
) -> (DenseMatrix, Vec<f64>, Vec<f64>) {
    let (n, f) = grad_out.shape();
    assert_eq!(cache.x_hat.shape(), (n, f), "batch_norm_backward shapes");

    let mut grad_gamma = vec![0.0; f];
    let mut grad_beta = vec![0.0; f];
    let mut sum_dxh = vec![0.0; f];
    let mut sum_dxh_xh = vec![0.0; f];
    for i in 0..n {
        for (j, (&g, &xh)) in grad_out.row(i).iter().zip(cache.x_hat.row(i)).enumerate() {
            grad_beta[j] += g;
            grad_gamma[j] += g * xh;
            let dxh = g * state.gamma[j];
            sum_dxh[j] += dxh;
            sum_dxh_xh[j] += dxh * xh;
        }
    }

    let mut grad_x = DenseMatrix::zeros(n, f);
    let nf = n as f64;
    for i in 0..n {
        for j in 0..f {
            let dxh = grad_out.get(i, j) * state.gamma[j];
            let v = cache.inv_std[j] / nf
                * (nf * dxh - sum_dxh[j] - cache.x_hat.get(i, j) * sum_dxh_xh[j]);
            grad_x.set(i, j, v);
        }
    }
    (grad_x, grad_gamma, grad_beta)
}
