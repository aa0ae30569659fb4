//! Affine layers, element-wise activations and the stable softmax, each with a
//! hand-derived backward pass.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::matrix::{glorot_init, DenseMatrix};

/// Dense affine transform `y = x W + b` with `W` of shape `(in_dim, out_dim)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Gradients for one affine layer, same shapes as the parameters.
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl AffineLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: glorot_init(in_dim, out_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(in_dim, out_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn zero_grads(&self) -> AffineGrads {
        AffineGrads {
            weight: DenseMatrix::zeros(self.in_dim(), self.out_dim()),
            bias: vec![0.0; self.out_dim()],
        }
    }
}

/// `out[i,j] = sum_k x[i,k] W[k,j] + b[j]`.
pub fn affine_forward(layer: &AffineLayer, x: &DenseMatrix) -> Result<DenseMatrix> {
    if x.cols() != layer.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "affine_forward",
            left: format!("input {}x{}", x.rows(), x.cols()),
            right: format!("weight {}x{}", layer.in_dim(), layer.out_dim()),
        });
    }
    let mut out = x.matmul(&layer.weight)?;
    out.add_row_vector(&layer.bias);
    Ok(out)
}

/// Backward of the affine transform:
/// `grad_x = grad_out W^T`, `grad_W = x^T grad_out`, `grad_b = column sums of grad_out`.
pub fn affine_backward(
    layer: &AffineLayer,
    x: &DenseMatrix,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, AffineGrads)> {
    if x.cols() != layer.in_dim() || grad_out.cols() != layer.out_dim() || x.rows() != grad_out.rows()
    {
        return Err(Error::ShapeMismatch {
            op: "affine_backward",
            left: format!("input {}x{}", x.rows(), x.cols()),
            right: format!("grad {}x{}", grad_out.rows(), grad_out.cols()),
        });
    }
    let grad_x = grad_out.matmul_nt(&layer.weight)?;
    let grad_w = x.matmul_tn(grad_out)?;
    let grad_b = grad_out.col_sums();
    Ok((
        grad_x,
        AffineGrads {
            weight: grad_w,
            bias: grad_b,
        },
    ))
}

/// Element-wise activation kinds used by the actor and critic networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    /// Exponential; inputs above `EXP_CLAMP` are clamped to avoid overflow and
    /// counted in [`ActivationOutput::saturated`].
    Exp,
}

/// Clamp threshold for the exp activation in 64-bit floats.
pub const EXP_CLAMP: f64 = 700.0;

pub struct ActivationOutput {
    pub value: DenseMatrix,
    /// Number of entries clamped by the exp activation (0 for other kinds).
    pub saturated: usize,
}

pub fn activation_forward(kind: Activation, x: &DenseMatrix) -> ActivationOutput {
    let mut out = x.clone();
    let mut saturated = 0usize;
    for v in out.data_mut() {
        *v = match kind {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => sigmoid(*v),
            Activation::Exp => {
                if *v > EXP_CLAMP {
                    saturated += 1;
                    EXP_CLAMP.exp()
                } else {
                    v.exp()
                }
            }
        };
    }
    ActivationOutput {
        value: out,
        saturated,
    }
}

/// Multiplies `grad_out` by the element-wise derivative, evaluated at the
/// pre-activation input `x`.
pub fn activation_backward(
    kind: Activation,
    x: &DenseMatrix,
    grad_out: &DenseMatrix,
) -> DenseMatrix {
    assert_eq!(x.shape(), grad_out.shape(), "activation_backward shapes");
    let mut out = grad_out.clone();
    for (g, &xi) in out.data_mut().iter_mut().zip(x.data()) {
        let d = match kind {
            Activation::Tanh => {
                let t = xi.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if xi > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(xi);
                s * (1.0 - s)
            }
            // Past the clamp the forward value is constant.
            Activation::Exp => {
                if xi > EXP_CLAMP {
                    0.0
                } else {
                    xi.exp()
                }
            }
        };
        *g *= d;
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax over a single row: subtracts the row max before
/// exponentiating, so arbitrarily large logits cannot overflow.
pub fn softmax_stable(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Row-wise [`softmax_stable`] over a matrix.
pub fn softmax_rows(x: &DenseMatrix) -> DenseMatrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
