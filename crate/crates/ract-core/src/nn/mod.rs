//! Minimal dense neural-network substrate: matrices, affine layers,
//! activations, batch normalization and Adam. Every forward pass has an
//! explicitly derived backward pass; nothing here allocates hidden state.

pub mod adam;
pub mod batchnorm;
pub mod layers;
pub mod matrix;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use batchnorm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchNormCache, BatchNormState};
pub use layers::{
    activation_backward, activation_forward, affine_backward, affine_forward, sigmoid,
    softmax_rows, softmax_stable, Activation, ActivationOutput, AffineGrads, AffineLayer,
};
pub use matrix::{glorot_init, DenseMatrix};
