//! Ranking-critical training engine for collaborative filtering on implicit
//! feedback.
//!
//! The engine trains maximum-likelihood autoencoder actors (multinomial VAE
//! and friends) against exact ranking metrics via a learned critic: a small
//! network over per-user sufficient statistics that approximates NDCG/Recall
//! and feeds a differentiable ranking signal back into the actor. Training
//! runs in three stages — actor pre-training, critic pre-training, and
//! alternating actor/critic updates — and is bit-for-bit reproducible from a
//! single seed.
//!
//! Modules map onto the pipeline:
//!
//! - [`nn`]: dense tensors, layers, batch norm, Adam, all with hand-derived
//!   backward passes
//! - [`data`]: sparse interaction matrices, ingestion, splits, masks
//! - [`ranking`]: the exact (non-differentiable) metric oracle
//! - [`actor`]: prediction policies and their loss gradients
//! - [`critic`]: the learned feature-based metric surrogate
//! - [`trainer`]: the three-stage schedule, evaluation and checkpoints
//! - [`config`]: flat key=value run configuration
//! - [`synth`]: cluster-structured synthetic benchmark data

pub mod actor;
pub mod config;
pub mod critic;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ranking;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
