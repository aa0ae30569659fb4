//! The feature-based critic: a small MLP over per-user sufficient statistics
//! `[L_E, |H0|, |H1|]` that learns to mimic the exact ranking oracle. Input
//! batch normalization absorbs the scale drift of the loss feature as the
//! actor trains; the gradient to the actor flows only through the loss
//! feature, never through the count features.

use crate::error::{Error, Result};
use crate::nn::{
    activation_backward, activation_forward, affine_backward, affine_forward, batch_norm_backward,
    batch_norm_eval, batch_norm_train, Activation, AffineGrads, AffineLayer, BatchNormCache,
    BatchNormState, DenseMatrix,
};
use crate::rng;

/// Hidden widths of the critic MLP between the feature input and the scalar
/// sigmoid output.
const HIDDEN: [usize; 3] = [100, 100, 10];

/// Per-user sufficient statistics fed to the critic. The loss feature is the
/// only differentiable input; the counts are constants of the data and mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticFeatures {
    /// One-sample loss feature L_E (NLL or ranking loss).
    pub nll: f64,
    /// Number of interactions hidden by the mask (|H0|).
    pub n_heldout: usize,
    /// Number of interactions kept by the mask (|H1|).
    pub n_observed: usize,
}

/// Count the held-out and observed interaction sets from dense vectors:
/// `H0 = {m : x_m = 1 and b_m = 0}`, `H1 = {m : x_m = 1 and b_m = 1}`.
/// The loss value passes through untouched so it keeps its gradient link.
pub fn extract_features(x: &[f64], keep_mask: &[f64], nll: f64) -> CriticFeatures {
    debug_assert_eq!(x.len(), keep_mask.len());
    let mut n_heldout = 0;
    let mut n_observed = 0;
    for (&xm, &bm) in x.iter().zip(keep_mask) {
        if xm != 0.0 {
            if bm != 0.0 {
                n_observed += 1;
            } else {
                n_heldout += 1;
            }
        }
    }
    CriticFeatures {
        nll,
        n_heldout,
        n_observed,
    }
}

/// Which feature columns the critic consumes; the loss feature is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticFeatureSet {
    Full,
    NllOnly,
    NllH0,
    NllH1,
}

impl CriticFeatureSet {
    pub fn dim(&self) -> usize {
        match self {
            CriticFeatureSet::Full => 3,
            CriticFeatureSet::NllOnly => 1,
            CriticFeatureSet::NllH0 | CriticFeatureSet::NllH1 => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CriticFeatureSet::Full => "full",
            CriticFeatureSet::NllOnly => "nll",
            CriticFeatureSet::NllH0 => "nll+h0",
            CriticFeatureSet::NllH1 => "nll+h1",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(CriticFeatureSet::Full),
            "nll" => Ok(CriticFeatureSet::NllOnly),
            "nll+h0" => Ok(CriticFeatureSet::NllH0),
            "nll+h1" => Ok(CriticFeatureSet::NllH1),
            other => Err(Error::InvalidConfig(format!(
                "unknown critic feature set `{other}` (full | nll | nll+h0 | nll+h1)"
            ))),
        }
    }

    fn project(&self, f: &CriticFeatures) -> Vec<f64> {
        match self {
            CriticFeatureSet::Full => vec![f.nll, f.n_heldout as f64, f.n_observed as f64],
            CriticFeatureSet::NllOnly => vec![f.nll],
            CriticFeatureSet::NllH0 => vec![f.nll, f.n_heldout as f64],
            CriticFeatureSet::NllH1 => vec![f.nll, f.n_observed as f64],
        }
    }
}

/// The critic network: input batch norm, three ReLU layers and a sigmoid
/// output in (0, 1).
#[derive(Debug, Clone)]
pub struct Critic {
    pub feature_set: CriticFeatureSet,
    pub bn: BatchNormState,
    pub layers: Vec<AffineLayer>,
}

/// Activations cached by a train-mode forward pass.
pub struct CriticCache {
    input: DenseMatrix,
    bn_cache: BatchNormCache,
    bn_out: DenseMatrix,
    pre: Vec<DenseMatrix>,
    post: Vec<DenseMatrix>,
    pub yhat: Vec<f64>,
}

/// Gradients for all learnable critic parameters.
pub struct CriticGrads {
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub layers: Vec<AffineGrads>,
}

impl Critic {
    pub fn new(feature_set: CriticFeatureSet, seed: u64) -> Self {
        let mut init_rng = rng::rng_from(seed, rng::stream::INIT, 1, 0);
        let dims: Vec<usize> = std::iter::once(feature_set.dim())
            .chain(HIDDEN)
            .chain(std::iter::once(1))
            .collect();
        let layers = dims
            .windows(2)
            .map(|w| AffineLayer::glorot(w[0], w[1], &mut init_rng))
            .collect();
        Self {
            feature_set,
            bn: BatchNormState::new(feature_set.dim()),
            layers,
        }
    }

    /// Stack projected features into the critic's input matrix.
    pub fn input_matrix(&self, features: &[CriticFeatures]) -> DenseMatrix {
        let rows: Vec<Vec<f64>> = features.iter().map(|f| self.feature_set.project(f)).collect();
        DenseMatrix::from_rows(&rows)
    }

    /// Train-mode forward: batch-norm uses batch statistics and updates the
    /// running ones. Requires at least two rows.
    pub fn forward_train(&mut self, input: &DenseMatrix) -> Result<CriticCache> {
        let (bn_out, bn_cache) = batch_norm_train(&mut self.bn, input)?;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut cur = bn_out.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let a = affine_forward(layer, &cur)?;
            let is_last = li + 1 == self.layers.len();
            let h = if is_last {
                activation_forward(Activation::Sigmoid, &a).value
            } else {
                activation_forward(Activation::Relu, &a).value
            };
            pre.push(a);
            post.push(h.clone());
            cur = h;
        }
        let yhat: Vec<f64> = (0..cur.rows()).map(|i| cur.get(i, 0)).collect();
        Ok(CriticCache {
            input: input.clone(),
            bn_cache,
            bn_out,
            pre,
            post,
            yhat,
        })
    }

    /// Eval-mode forward using running batch-norm statistics; works on any
    /// batch size.
    pub fn forward_eval(&self, input: &DenseMatrix) -> Result<Vec<f64>> {
        let mut cur = batch_norm_eval(&self.bn, input);
        for (li, layer) in self.layers.iter().enumerate() {
            let a = affine_forward(layer, &cur)?;
            let is_last = li + 1 == self.layers.len();
            cur = if is_last {
                activation_forward(Activation::Sigmoid, &a).value
            } else {
                activation_forward(Activation::Relu, &a).value
            };
        }
        Ok((0..cur.rows()).map(|i| cur.get(i, 0)).collect())
    }

    /// Backward from per-row output gradients through the whole network,
    /// returning parameter gradients and the gradient at the feature input.
    pub fn backward(
        &self,
        cache: &CriticCache,
        d_yhat: &[f64],
    ) -> Result<(CriticGrads, DenseMatrix)> {
        let n = d_yhat.len();
        assert_eq!(n, cache.input.rows(), "critic backward batch size");
        let last = self.layers.len() - 1;
        // through the output sigmoid
        let mut grad = DenseMatrix::zeros(n, 1);
        for (i, (&dy, &y)) in d_yhat.iter().zip(&cache.yhat).enumerate() {
            grad.set(i, 0, dy * y * (1.0 - y));
        }

        let mut layer_grads: Vec<Option<AffineGrads>> = vec![None; self.layers.len()];
        for li in (0..=last).rev() {
            if li != last {
                grad = activation_backward(Activation::Relu, &cache.pre[li], &grad);
            }
            let below = if li == 0 { &cache.bn_out } else { &cache.post[li - 1] };
            let (g_below, g_layer) = affine_backward(&self.layers[li], below, &grad)?;
            layer_grads[li] = Some(g_layer);
            grad = g_below;
        }
        let (d_input, bn_gamma, bn_beta) = batch_norm_backward(&self.bn, &cache.bn_cache, &grad);
        Ok((
            CriticGrads {
                bn_gamma,
                bn_beta,
                layers: layer_grads.into_iter().map(Option::unwrap).collect(),
            },
            d_input,
        ))
    }

    /// Named views over the learnable parameters (running stats excluded).
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = vec![
            ("critic.bn.gamma".into(), &self.bn.gamma),
            ("critic.bn.beta".into(), &self.bn.beta_shift),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("critic.l{i}.weight"), l.weight.data()));
            v.push((format!("critic.l{i}.bias"), &l.bias));
        }
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v: Vec<(String, &mut [f64])> = vec![
            ("critic.bn.gamma".into(), self.bn.gamma.as_mut_slice()),
            ("critic.bn.beta".into(), self.bn.beta_shift.as_mut_slice()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("critic.l{i}.weight"), l.weight.data_mut()));
            v.push((format!("critic.l{i}.bias"), l.bias.as_mut_slice()));
        }
        v
    }

    /// Fingerprint of the learnable parameters; the batch-norm running
    /// statistics are deliberately excluded (they track the feature
    /// distribution even while the learnable critic is frozen).
    pub fn fingerprint_learnable(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (_, block) in self.blocks() {
            for &v in block {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

impl CriticGrads {
    /// Same ordering as [`Critic::blocks`].
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = vec![
            ("critic.bn.gamma".into(), self.bn_gamma.as_slice()),
            ("critic.bn.beta".into(), self.bn_beta.as_slice()),
        ];
        for (i, g) in self.layers.iter().enumerate() {
            v.push((format!("critic.l{i}.weight"), g.weight.data()));
            v.push((format!("critic.l{i}.bias"), &g.bias));
        }
        v
    }
}

/// Mean squared error between critic outputs and oracle targets, with the
/// gradient to the outputs: `d/dyhat_i = 2 (yhat_i - y_i) / B`.
pub fn critic_mse(yhat: &[f64], y: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(yhat.len(), y.len());
    let b = yhat.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; yhat.len()];
    for i in 0..yhat.len() {
        let d = yhat[i] - y[i];
        loss += d * d;
        grad[i] = 2.0 * d / b;
    }
    (loss / b, grad)
}

/// The actor's ranking objective `L_A = mean(critic score)` with the gradient
/// restricted to the loss feature. The count features are constants of the
/// data and mask, so no gradient ever flows through them.
pub struct ActorObjective {
    pub value: f64,
    /// `B x 3` gradient over `[L_E, |H0|, |H1|]`; the count columns are zero
    /// by construction.
    pub d_features: DenseMatrix,
}

impl ActorObjective {
    pub fn dnll(&self) -> Vec<f64> {
        (0..self.d_features.rows()).map(|i| self.d_features.get(i, 0)).collect()
    }
}

/// Exact oracle targets for a batch: one metric score per row of the
/// prediction matrix, ranking with each row's observed items excluded. Every
/// row must have a non-empty held-out set (callers drop |H0| = 0 rows).
pub fn oracle_targets_for_batch(
    predictions: &DenseMatrix,
    targets: &[Vec<u32>],
    observed: &[Vec<u32>],
    spec: crate::ranking::MetricSpec,
) -> Result<Vec<f64>> {
    assert_eq!(predictions.rows(), targets.len());
    assert_eq!(predictions.rows(), observed.len());
    (0..predictions.rows())
        .map(|i| crate::ranking::oracle_score(predictions.row(i), &targets[i], &observed[i], spec))
        .collect()
}

/// Evaluate the actor objective over a feature batch with the critic's batch
/// norm in train mode (its running statistics keep tracking the shifting
/// feature distribution); the learnable critic parameters are left untouched.
pub fn actor_objective(critic: &mut Critic, features: &[CriticFeatures]) -> Result<ActorObjective> {
    let input = critic.input_matrix(features);
    let cache = critic.forward_train(&input)?;
    let b = features.len();
    let value = cache.yhat.iter().sum::<f64>() / b as f64;
    let d_yhat = vec![1.0 / b as f64; b];
    let (_, d_input) = critic.backward(&cache, &d_yhat)?;
    // only the loss-feature column reaches the actor
    let mut d_features = DenseMatrix::zeros(b, 3);
    for i in 0..b {
        d_features.set(i, 0, d_input.get(i, 0));
    }
    Ok(ActorObjective { value, d_features })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature_batch(n: usize, seed: u64) -> Vec<CriticFeatures> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| CriticFeatures {
                nll: rng.gen_range(1.0..30.0),
                n_heldout: rng.gen_range(1..20),
                n_observed: rng.gen_range(0..40),
            })
            .collect()
    }

    #[test]
    fn feature_extraction_counts_sets() {
        let x = [1.0, 1.0, 0.0, 0.0];
        let b = [1.0, 0.0, 1.0, 1.0];
        let f = extract_features(&x, &b, 2.5);
        assert_eq!(f.n_heldout, 1);
        assert_eq!(f.n_observed, 1);
        assert_eq!(f.nll.to_bits(), 2.5f64.to_bits());
    }

    #[test]
    fn all_kept_means_empty_heldout() {
        let x = [1.0, 1.0, 0.0];
        let b = [1.0, 1.0, 1.0];
        let f = extract_features(&x, &b, 0.1);
        assert_eq!(f.n_heldout, 0);
    }

    #[test]
    fn zeroed_final_layer_outputs_half() {
        let mut critic = Critic::new(CriticFeatureSet::Full, 3);
        let last = critic.layers.len() - 1;
        critic.layers[last] = AffineLayer::zeros(10, 1);
        let input = critic.input_matrix(&feature_batch(4, 1));
        let cache = critic.forward_train(&input).unwrap();
        for y in cache.yhat {
            assert_eq!(y, 0.5);
        }
    }

    #[test]
    fn outputs_strictly_inside_unit_interval() {
        let mut critic = Critic::new(CriticFeatureSet::Full, 5);
        let input = critic.input_matrix(&feature_batch(16, 2));
        let cache = critic.forward_train(&input).unwrap();
        assert!(cache.yhat.iter().all(|&y| y > 0.0 && y < 1.0));
        let eval = critic.forward_eval(&input).unwrap();
        assert!(eval.iter().all(|&y| y > 0.0 && y < 1.0));
    }

    #[test]
    fn train_mode_requires_two_rows() {
        let mut critic = Critic::new(CriticFeatureSet::Full, 5);
        let input = critic.input_matrix(&feature_batch(1, 2));
        assert!(critic.forward_train(&input).is_err());
    }

    #[test]
    fn mse_values_and_gradient() {
        let (loss, _) = critic_mse(&[0.3, 0.8], &[0.3, 0.8]);
        assert_eq!(loss, 0.0);
        let (loss, grad) = critic_mse(&[0.5], &[1.0]);
        assert!((loss - 0.25).abs() < 1e-15);
        assert!((grad[0] + 1.0).abs() < 1e-15);

        let yhat = [0.2, 0.7, 0.4];
        let y = [0.1, 0.9, 0.4];
        let (_, grad) = critic_mse(&yhat, &y);
        let f = |v: &[f64]| critic_mse(v, &y).0;
        let num = central_diff_grad(&f, &yhat, 1e-6);
        assert!(max_rel_err(&grad, &num) < 1e-8);
    }

    #[test]
    fn gradient_wrt_nll_feature_matches_finite_differences() {
        let critic = Critic::new(CriticFeatureSet::Full, 11);
        let feats = feature_batch(6, 3);
        let obj = actor_objective(&mut critic.clone(), &feats).unwrap();
        let nlls: Vec<f64> = feats.iter().map(|f| f.nll).collect();
        let f = |nv: &[f64]| {
            let mut c = critic.clone();
            let mut fs = feats.clone();
            for (fx, &n) in fs.iter_mut().zip(nv) {
                fx.nll = n;
            }
            actor_objective(&mut c, &fs).unwrap().value
        };
        let num = central_diff_grad(&f, &nlls, 1e-6);
        assert!(max_rel_err(&obj.dnll(), &num) < 1e-5);
    }

    #[test]
    fn count_feature_gradients_are_exactly_zero() {
        let mut critic = Critic::new(CriticFeatureSet::Full, 11);
        let obj = actor_objective(&mut critic, &feature_batch(6, 4)).unwrap();
        for i in 0..obj.d_features.rows() {
            assert_eq!(obj.d_features.get(i, 1), 0.0);
            assert_eq!(obj.d_features.get(i, 2), 0.0);
        }
    }

    #[test]
    fn frozen_critic_objective_is_deterministic() {
        let critic = Critic::new(CriticFeatureSet::Full, 11);
        let feats = feature_batch(5, 6);
        let a = actor_objective(&mut critic.clone(), &feats).unwrap().value;
        let b = actor_objective(&mut critic.clone(), &feats).unwrap().value;
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        // small inputs to stay clear of ReLU kinks under perturbation
        let critic = Critic::new(CriticFeatureSet::Full, 17);
        let feats = feature_batch(5, 9);
        let input = critic.input_matrix(&feats);
        let targets = [0.9, 0.1, 0.5, 0.3, 0.7];

        let loss_of = |c: &Critic| {
            let mut c = c.clone();
            let cache = c.forward_train(&input).unwrap();
            critic_mse(&cache.yhat, &targets).0
        };

        let mut work = critic.clone();
        let cache = work.forward_train(&input).unwrap();
        let (_, d_yhat) = critic_mse(&cache.yhat, &targets);
        let (grads, _) = work.backward(&cache, &d_yhat).unwrap();

        let analytic: Vec<f64> = grads.blocks().iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        let flat: Vec<f64> = critic.blocks().iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        let f = |vals: &[f64]| {
            let mut c = critic.clone();
            let mut off = 0;
            for (_, block) in c.blocks_mut() {
                block.copy_from_slice(&vals[off..off + block.len()]);
                off += block.len();
            }
            loss_of(&c)
        };
        let numeric = central_diff_grad(&f, &flat, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "critic param gradient err {err}");
    }

    #[test]
    fn feature_set_projection_dims() {
        let f = CriticFeatures {
            nll: 3.0,
            n_heldout: 2,
            n_observed: 5,
        };
        assert_eq!(CriticFeatureSet::Full.project(&f), vec![3.0, 2.0, 5.0]);
        assert_eq!(CriticFeatureSet::NllOnly.project(&f), vec![3.0]);
        assert_eq!(CriticFeatureSet::NllH0.project(&f), vec![3.0, 2.0]);
        assert_eq!(CriticFeatureSet::NllH1.project(&f), vec![3.0, 5.0]);
        assert!(CriticFeatureSet::parse("nll+h0").is_ok());
        assert!(CriticFeatureSet::parse("bogus").is_err());
    }
}
