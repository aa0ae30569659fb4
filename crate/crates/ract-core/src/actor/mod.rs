//! Prediction policies: the multinomial variational autoencoder and its
//! variants (Gaussian likelihood, deterministic latent, linear, shallow
//! autoencoder, matrix factorization), plus BPR/WARP-trained networks. Each
//! exposes a batched forward pass, per-user loss values and a hand-derived
//! backward pass over all parameters.

pub mod losses;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{
    activation_backward, activation_forward, affine_backward, affine_forward, softmax_rows,
    Activation, AffineGrads, AffineLayer, DenseMatrix,
};
use crate::rng;

pub use losses::{
    bpr_loss, kl_gaussian, nll_gaussian, nll_multinomial, warp_loss_exact, warp_loss_sampled,
    warp_weight,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Likelihood {
    /// Softmax head; per-user loss is the multinomial NLL.
    Multinomial,
    /// Identity head; per-user loss is half squared error.
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Likelihood-based training (NLL + beta * KL).
    Mle,
    Bpr,
    Warp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarpMode {
    Exact,
    Sampled,
}

/// Architecture and objective knobs for one actor.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorConfig {
    /// Latent width K.
    pub latent_dim: usize,
    /// Hidden layer width (unused for `linear` and `shallow` shapes).
    pub hidden_dim: usize,
    pub likelihood: Likelihood,
    /// Posterior sampling when true; delta distribution (z = mu) when false.
    pub variational: bool,
    /// Drop the hidden layers and nonlinearity on both sides.
    pub linear: bool,
    /// Shallow autoencoder shape M -> K (tanh) -> M with a direct latent:
    /// no mean/variance head, never variational.
    pub shallow: bool,
    /// Weight penalty applied when training with beta = 0.
    pub l2_weight: f64,
    pub loss_kind: LossKind,
    pub warp_mode: WarpMode,
}

impl ActorConfig {
    /// Multinomial variational autoencoder, the default actor.
    pub fn vae(latent_dim: usize, hidden_dim: usize) -> Self {
        Self {
            latent_dim,
            hidden_dim,
            likelihood: Likelihood::Multinomial,
            variational: true,
            linear: false,
            shallow: false,
            l2_weight: 0.01,
            loss_kind: LossKind::Mle,
            warp_mode: WarpMode::Exact,
        }
    }

    /// Same network with a Gaussian likelihood head.
    pub fn vae_gaussian(latent_dim: usize, hidden_dim: usize) -> Self {
        Self {
            likelihood: Likelihood::Gaussian,
            ..Self::vae(latent_dim, hidden_dim)
        }
    }

    /// Deterministic latent (delta posterior); train with beta = 0 and the
    /// l2 penalty instead of the KL term.
    pub fn vae_beta0(latent_dim: usize, hidden_dim: usize) -> Self {
        Self {
            variational: false,
            ..Self::vae(latent_dim, hidden_dim)
        }
    }

    /// Linear encoder and decoder, still variational.
    pub fn vae_linear(latent_dim: usize) -> Self {
        Self {
            linear: true,
            ..Self::vae(latent_dim, 0)
        }
    }

    /// Shallow denoising autoencoder M -> latent (tanh) -> M.
    pub fn dae(latent_dim: usize) -> Self {
        Self {
            variational: false,
            shallow: true,
            ..Self::vae(latent_dim, 0)
        }
    }

    /// Matrix factorization: linear maps with a Gaussian likelihood and a
    /// deterministic latent.
    pub fn mf(latent_dim: usize) -> Self {
        Self {
            likelihood: Likelihood::Gaussian,
            variational: false,
            linear: true,
            ..Self::vae(latent_dim, 0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 1 {
            return Err(Error::InvalidConfig("latent_dim must be >= 1".into()));
        }
        if !self.linear && !self.shallow && self.hidden_dim < 1 {
            return Err(Error::InvalidConfig("hidden_dim must be >= 1".into()));
        }
        if self.shallow && self.variational {
            return Err(Error::InvalidConfig(
                "shallow autoencoder has no posterior to sample".into(),
            ));
        }
        if self.l2_weight < 0.0 {
            return Err(Error::InvalidConfig("l2_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Encoder/decoder weights. Hidden layers are absent for the linear and
/// shallow shapes. For the variational family `enc_out` is M-or-hidden -> 2K,
/// split into mean and log-variance halves; for the shallow shape it maps
/// directly to the latent.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorParams {
    pub enc_hidden: Option<AffineLayer>,
    pub enc_out: AffineLayer,
    pub dec_hidden: Option<AffineLayer>,
    pub dec_out: AffineLayer,
}

/// Gradients mirroring [`ActorParams`].
#[derive(Debug, Clone)]
pub struct ActorGrads {
    pub enc_hidden: Option<AffineGrads>,
    pub enc_out: AffineGrads,
    pub dec_hidden: Option<AffineGrads>,
    pub dec_out: AffineGrads,
}

impl ActorParams {
    pub fn init(config: &ActorConfig, n_items: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = config.latent_dim;
        if config.shallow {
            Self {
                enc_hidden: None,
                enc_out: AffineLayer::glorot(n_items, k, rng),
                dec_hidden: None,
                dec_out: AffineLayer::glorot(k, n_items, rng),
            }
        } else if config.linear {
            Self {
                enc_hidden: None,
                enc_out: AffineLayer::glorot(n_items, 2 * k, rng),
                dec_hidden: None,
                dec_out: AffineLayer::glorot(k, n_items, rng),
            }
        } else {
            let h = config.hidden_dim;
            Self {
                enc_hidden: Some(AffineLayer::glorot(n_items, h, rng)),
                enc_out: AffineLayer::glorot(h, 2 * k, rng),
                dec_hidden: Some(AffineLayer::glorot(k, h, rng)),
                dec_out: AffineLayer::glorot(h, n_items, rng),
            }
        }
    }

    pub fn n_items(&self) -> usize {
        self.dec_out.out_dim()
    }

    /// Named views over every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = Vec::new();
        if let Some(l) = &self.enc_hidden {
            v.push(("actor.enc_hidden.weight".into(), l.weight.data()));
            v.push(("actor.enc_hidden.bias".into(), &l.bias));
        }
        v.push(("actor.enc_out.weight".into(), self.enc_out.weight.data()));
        v.push(("actor.enc_out.bias".into(), &self.enc_out.bias));
        if let Some(l) = &self.dec_hidden {
            v.push(("actor.dec_hidden.weight".into(), l.weight.data()));
            v.push(("actor.dec_hidden.bias".into(), &l.bias));
        }
        v.push(("actor.dec_out.weight".into(), self.dec_out.weight.data()));
        v.push(("actor.dec_out.bias".into(), &self.dec_out.bias));
        v
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut v: Vec<(String, &mut [f64])> = Vec::new();
        if let Some(l) = &mut self.enc_hidden {
            v.push(("actor.enc_hidden.weight".into(), l.weight.data_mut()));
            v.push(("actor.enc_hidden.bias".into(), l.bias.as_mut_slice()));
        }
        v.push(("actor.enc_out.weight".into(), self.enc_out.weight.data_mut()));
        v.push(("actor.enc_out.bias".into(), self.enc_out.bias.as_mut_slice()));
        if let Some(l) = &mut self.dec_hidden {
            v.push(("actor.dec_hidden.weight".into(), l.weight.data_mut()));
            v.push(("actor.dec_hidden.bias".into(), l.bias.as_mut_slice()));
        }
        v.push(("actor.dec_out.weight".into(), self.dec_out.weight.data_mut()));
        v.push(("actor.dec_out.bias".into(), self.dec_out.bias.as_mut_slice()));
        v
    }

    /// Order-insensitive fingerprint of all parameter bits; used to assert
    /// freeze contracts during alternating training.
    pub fn fingerprint(&self) -> u64 {
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

impl ActorGrads {
    fn zeros_like(params: &ActorParams) -> Self {
        Self {
            enc_hidden: params.enc_hidden.as_ref().map(|l| l.zero_grads()),
            enc_out: params.enc_out.zero_grads(),
            dec_hidden: params.dec_hidden.as_ref().map(|l| l.zero_grads()),
            dec_out: params.dec_out.zero_grads(),
        }
    }

    /// Same ordering as [`ActorParams::blocks`].
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut v: Vec<(String, &[f64])> = Vec::new();
        if let Some(g) = &self.enc_hidden {
            v.push(("actor.enc_hidden.weight".into(), g.weight.data()));
            v.push(("actor.enc_hidden.bias".into(), &g.bias));
        }
        v.push(("actor.enc_out.weight".into(), self.enc_out.weight.data()));
        v.push(("actor.enc_out.bias".into(), &self.enc_out.bias));
        if let Some(g) = &self.dec_hidden {
            v.push(("actor.dec_hidden.weight".into(), g.weight.data()));
            v.push(("actor.dec_hidden.bias".into(), &g.bias));
        }
        v.push(("actor.dec_out.weight".into(), self.dec_out.weight.data()));
        v.push(("actor.dec_out.bias".into(), &self.dec_out.bias));
        v
    }
}

/// Per-batch artifacts of one forward pass. `pi` holds probabilities for the
/// multinomial head and raw scores otherwise; `nll` is the per-user loss
/// feature L_E and `kl` the per-user KL term.
#[derive(Debug, Clone)]
pub struct ActorOutput {
    pub mu: DenseMatrix,
    pub log_var: DenseMatrix,
    pub z: DenseMatrix,
    pub pi: DenseMatrix,
    pub nll: Vec<f64>,
    pub kl: Vec<f64>,
}

/// Intermediate encoder activations.
struct EncoderPass {
    mu: DenseMatrix,
    log_var: DenseMatrix,
    enc_pre: Option<DenseMatrix>,
    enc_h: Option<DenseMatrix>,
    enc_out_pre: DenseMatrix,
}

/// Everything the backward pass needs from the forward pass.
pub struct ForwardCache {
    pub x_in: DenseMatrix,
    enc_pre: Option<DenseMatrix>,
    enc_h: Option<DenseMatrix>,
    enc_out_pre: DenseMatrix,
    pub mu: DenseMatrix,
    pub log_var: DenseMatrix,
    pub eps: DenseMatrix,
    pub z: DenseMatrix,
    dec_pre: Option<DenseMatrix>,
    dec_h: Option<DenseMatrix>,
    pub logits: DenseMatrix,
    pub pi: DenseMatrix,
}

/// Result of a full loss evaluation: batch objective, per-user outputs and
/// gradients for every parameter block.
pub struct ActorStepOutput {
    pub loss: f64,
    pub output: ActorOutput,
    pub grads: ActorGrads,
}

#[derive(Debug, Clone)]
pub struct Actor {
    pub config: ActorConfig,
    pub params: ActorParams,
}

impl Actor {
    pub fn new(config: ActorConfig, n_items: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init_rng = rng::rng_from(seed, rng::stream::INIT, 0, 0);
        let params = ActorParams::init(&config, n_items, &mut init_rng);
        Ok(Self { config, params })
    }

    pub fn n_items(&self) -> usize {
        self.params.n_items()
    }

    /// Deterministic map from an input batch to the posterior mean and
    /// log-variance. The shallow shape has no variance head; its latent is
    /// reported as the mean with zero log-variance.
    pub fn encode(&self, x_in: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        let pass = self.forward_encoder(x_in)?;
        Ok((pass.mu, pass.log_var))
    }

    fn forward_encoder(&self, x_in: &DenseMatrix) -> Result<EncoderPass> {
        let k = self.config.latent_dim;
        let (enc_pre, enc_h) = if let Some(l) = &self.params.enc_hidden {
            let pre = affine_forward(l, x_in)?;
            let h = activation_forward(Activation::Tanh, &pre).value;
            (Some(pre), Some(h))
        } else {
            (None, None)
        };
        let enc_in = enc_h.as_ref().unwrap_or(x_in);
        let enc_out_pre = affine_forward(&self.params.enc_out, enc_in)?;
        let b = enc_out_pre.rows();
        let (mu, log_var) = if self.config.shallow {
            let mu = activation_forward(Activation::Tanh, &enc_out_pre).value;
            (mu, DenseMatrix::zeros(b, k))
        } else {
            let mut mu = DenseMatrix::zeros(b, k);
            let mut log_var = DenseMatrix::zeros(b, k);
            for i in 0..b {
                let row = enc_out_pre.row(i);
                mu.row_mut(i).copy_from_slice(&row[..k]);
                log_var.row_mut(i).copy_from_slice(&row[k..]);
            }
            (mu, log_var)
        };
        Ok(EncoderPass {
            mu,
            log_var,
            enc_pre,
            enc_h,
            enc_out_pre,
        })
    }

    /// Decode a latent batch into prediction scores: softmax probabilities for
    /// the multinomial head, raw scores otherwise.
    pub fn decode(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        let (_, _, pi) = self.forward_decoder(z)?;
        Ok(pi)
    }

    fn forward_decoder(
        &self,
        z: &DenseMatrix,
    ) -> Result<(Option<DenseMatrix>, Option<DenseMatrix>, DenseMatrix)> {
        let (dec_pre, dec_h) = if let Some(l) = &self.params.dec_hidden {
            let pre = affine_forward(l, z)?;
            let h = activation_forward(Activation::Tanh, &pre).value;
            (Some(pre), Some(h))
        } else {
            (None, None)
        };
        let dec_in = dec_h.as_ref().unwrap_or(z);
        let logits = affine_forward(&self.params.dec_out, dec_in)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        let pi = match self.config.likelihood {
            Likelihood::Multinomial => softmax_rows(&logits),
            Likelihood::Gaussian => logits,
        };
        Ok((dec_pre, dec_h, pi))
    }

    /// Full forward pass with explicit reparametrization noise (one column
    /// per latent dimension). Pass a zero matrix for deterministic variants.
    pub fn forward_with_noise(&self, x_in: &DenseMatrix, eps: DenseMatrix) -> Result<ForwardCache> {
        let EncoderPass {
            mu,
            log_var,
            enc_pre,
            enc_h,
            enc_out_pre,
        } = self.forward_encoder(x_in)?;
        assert_eq!(eps.shape(), mu.shape(), "noise shape");
        let mut z = mu.clone();
        if self.config.variational {
            for i in 0..z.rows() {
                let lv = log_var.row(i);
                let er = eps.row(i);
                for (k, v) in z.row_mut(i).iter_mut().enumerate() {
                    *v += (lv[k] / 2.0).exp() * er[k];
                }
            }
        }
        let (dec_pre, dec_h) = if let Some(l) = &self.params.dec_hidden {
            let pre = affine_forward(l, &z)?;
            let h = activation_forward(Activation::Tanh, &pre).value;
            (Some(pre), Some(h))
        } else {
            (None, None)
        };
        let dec_in = dec_h.as_ref().unwrap_or(&z);
        let logits = affine_forward(&self.params.dec_out, dec_in)?;
        if !logits.is_finite() {
            return Err(Error::NonFinite("decoder logits".into()));
        }
        let pi = match self.config.likelihood {
            Likelihood::Multinomial => softmax_rows(&logits),
            Likelihood::Gaussian => logits.clone(),
        };
        Ok(ForwardCache {
            x_in: x_in.clone(),
            enc_pre,
            enc_h,
            enc_out_pre,
            mu,
            log_var,
            eps,
            z,
            dec_pre,
            dec_h,
            logits,
            pi,
        })
    }

    /// Forward pass drawing fresh reparametrization noise from `rng`
    /// (all-zero noise for deterministic variants).
    pub fn forward_sampled(&self, x_in: &DenseMatrix, rng: &mut ChaCha8Rng) -> Result<ForwardCache> {
        let eps = self.draw_noise(x_in.rows(), rng);
        self.forward_with_noise(x_in, eps)
    }

    pub fn draw_noise(&self, batch: usize, rng_src: &mut ChaCha8Rng) -> DenseMatrix {
        let mut eps = DenseMatrix::zeros(batch, self.config.latent_dim);
        if self.config.variational {
            for v in eps.data_mut() {
                *v = rng::standard_normal(rng_src);
            }
        }
        eps
    }

    /// Per-user loss feature L_E (NLL or ranking loss, by `loss_kind`) and its
    /// gradient with respect to the decoder logits, one row per user.
    pub fn eval_loss_feature(
        &self,
        cache: &ForwardCache,
        x_full: &DenseMatrix,
        mut warp_rng: Option<&mut ChaCha8Rng>,
    ) -> (Vec<f64>, DenseMatrix) {
        let b = cache.logits.rows();
        let mut le = Vec::with_capacity(b);
        let mut dlogits = DenseMatrix::zeros(b, cache.logits.cols());
        for i in 0..b {
            let x = x_full.row(i);
            match self.config.loss_kind {
                LossKind::Mle => match self.config.likelihood {
                    Likelihood::Multinomial => {
                        let pi = cache.pi.row(i);
                        le.push(nll_multinomial(x, pi));
                        let x_sum: f64 = x.iter().sum();
                        for (j, g) in dlogits.row_mut(i).iter_mut().enumerate() {
                            *g = pi[j] * x_sum - x[j];
                        }
                    }
                    Likelihood::Gaussian => {
                        let s = cache.logits.row(i);
                        le.push(nll_gaussian(x, s));
                        for (j, g) in dlogits.row_mut(i).iter_mut().enumerate() {
                            *g = s[j] - x[j];
                        }
                    }
                },
                LossKind::Bpr => {
                    let positives = support(x);
                    let (loss, grad) = bpr_loss(cache.logits.row(i), &positives);
                    le.push(loss);
                    dlogits.row_mut(i).copy_from_slice(&grad);
                }
                LossKind::Warp => {
                    let positives = support(x);
                    let (loss, grad) = match (self.config.warp_mode, warp_rng.as_deref_mut()) {
                        (WarpMode::Sampled, Some(rng_ref)) => {
                            warp_loss_sampled(cache.logits.row(i), &positives, rng_ref)
                        }
                        _ => warp_loss_exact(cache.logits.row(i), &positives),
                    };
                    le.push(loss);
                    dlogits.row_mut(i).copy_from_slice(&grad);
                }
            }
        }
        (le, dlogits)
    }

    fn per_row_kl(&self, cache: &ForwardCache) -> Vec<f64> {
        let b = cache.mu.rows();
        if self.config.shallow {
            return vec![0.0; b];
        }
        (0..b)
            .map(|i| kl_gaussian(cache.mu.row(i), cache.log_var.row(i)))
            .collect()
    }

    /// Train-time objective: mean over the batch of `L_E + beta * KL`, plus
    /// the l2 weight penalty when beta is zero. Returns per-user outputs and
    /// full parameter gradients.
    pub fn elbo_loss(
        &self,
        x_full: &DenseMatrix,
        x_in: &DenseMatrix,
        beta: f64,
        rng_src: &mut ChaCha8Rng,
    ) -> Result<ActorStepOutput> {
        let eps = self.draw_noise(x_in.rows(), rng_src);
        self.elbo_loss_with_noise(x_full, x_in, beta, eps, Some(rng_src))
    }

    /// Same as [`Actor::elbo_loss`] but with frozen reparametrization noise,
    /// so the whole objective is a deterministic function of the parameters
    /// (used by the gradient checks). Sampled WARP falls back to the exact
    /// loss when no generator is supplied.
    pub fn elbo_loss_with_noise(
        &self,
        x_full: &DenseMatrix,
        x_in: &DenseMatrix,
        beta: f64,
        eps: DenseMatrix,
        warp_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ActorStepOutput> {
        let cache = self.forward_with_noise(x_in, eps)?;
        let (le, mut dlogits) = self.eval_loss_feature(&cache, x_full, warp_rng);
        let kl = self.per_row_kl(&cache);
        let b = cache.logits.rows() as f64;
        let inv_b = 1.0 / b;
        dlogits.scale(inv_b);

        let l2 = if beta == 0.0 { self.config.l2_weight } else { 0.0 };
        let mut loss = le.iter().sum::<f64>() * inv_b + beta * kl.iter().sum::<f64>() * inv_b;
        if l2 > 0.0 {
            loss += l2 * self.weight_squared_norm();
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }

        let grads = self.backward(&cache, &dlogits, beta * inv_b, l2)?;
        Ok(ActorStepOutput {
            loss,
            output: ActorOutput {
                mu: cache.mu.clone(),
                log_var: cache.log_var.clone(),
                z: cache.z.clone(),
                pi: cache.pi.clone(),
                nll: le,
                kl,
            },
            grads,
        })
    }

    fn weight_squared_norm(&self) -> f64 {
        let mut n = self.params.enc_out.weight.squared_norm() + self.params.dec_out.weight.squared_norm();
        if let Some(l) = &self.params.enc_hidden {
            n += l.weight.squared_norm();
        }
        if let Some(l) = &self.params.dec_hidden {
            n += l.weight.squared_norm();
        }
        n
    }

    /// Backward pass from already-scaled logit gradients. `kl_coeff` scales
    /// the KL path (zero disables it); `l2` adds `2*l2*W` to weight grads.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &DenseMatrix,
        kl_coeff: f64,
        l2: f64,
    ) -> Result<ActorGrads> {
        let mut grads = ActorGrads::zeros_like(&self.params);

        // decoder
        let dz = if let Some(l) = &self.params.dec_hidden {
            let dec_h = cache.dec_h.as_ref().unwrap();
            let dec_pre = cache.dec_pre.as_ref().unwrap();
            let (dh, g_out) = affine_backward(&self.params.dec_out, dec_h, dlogits)?;
            grads.dec_out = g_out;
            let da = activation_backward(Activation::Tanh, dec_pre, &dh);
            let (dz, g_hidden) = affine_backward(l, &cache.z, &da)?;
            grads.dec_hidden = Some(g_hidden);
            dz
        } else {
            let (dz, g_out) = affine_backward(&self.params.dec_out, &cache.z, dlogits)?;
            grads.dec_out = g_out;
            dz
        };

        // latent head
        let d_enc_out_pre = if self.config.shallow {
            // z = tanh(enc_out_pre)
            activation_backward(Activation::Tanh, &cache.enc_out_pre, &dz)
        } else {
            let (b, k) = dz.shape();
            let mut dmu = dz.clone();
            let mut dlv = DenseMatrix::zeros(b, k);
            if self.config.variational {
                // z = mu + exp(log_var / 2) * eps
                for i in 0..b {
                    let lv = cache.log_var.row(i);
                    let er = cache.eps.row(i);
                    let dzr = dz.row(i);
                    for (j, g) in dlv.row_mut(i).iter_mut().enumerate() {
                        *g = dzr[j] * er[j] * (lv[j] / 2.0).exp() * 0.5;
                    }
                }
            }
            if kl_coeff != 0.0 {
                for i in 0..b {
                    let mu = cache.mu.row(i);
                    let lv = cache.log_var.row(i);
                    let dmu_row = dmu.row_mut(i);
                    for j in 0..k {
                        dmu_row[j] += kl_coeff * mu[j];
                    }
                    let dlv_row = dlv.row_mut(i);
                    for j in 0..k {
                        dlv_row[j] += kl_coeff * 0.5 * (lv[j].exp() - 1.0);
                    }
                }
            }
            let mut de = DenseMatrix::zeros(b, 2 * k);
            for i in 0..b {
                de.row_mut(i)[..k].copy_from_slice(dmu.row(i));
                de.row_mut(i)[k..].copy_from_slice(dlv.row(i));
            }
            de
        };

        // encoder
        if let Some(l) = &self.params.enc_hidden {
            let enc_h = cache.enc_h.as_ref().unwrap();
            let enc_pre = cache.enc_pre.as_ref().unwrap();
            let (dh, g_out) = affine_backward(&self.params.enc_out, enc_h, &d_enc_out_pre)?;
            grads.enc_out = g_out;
            let da = activation_backward(Activation::Tanh, enc_pre, &dh);
            let (_, g_hidden) = affine_backward(l, &cache.x_in, &da)?;
            grads.enc_hidden = Some(g_hidden);
        } else {
            let (_, g_out) = affine_backward(&self.params.enc_out, &cache.x_in, &d_enc_out_pre)?;
            grads.enc_out = g_out;
        }

        if l2 > 0.0 {
            add_l2(&mut grads.enc_out.weight, &self.params.enc_out.weight, l2);
            add_l2(&mut grads.dec_out.weight, &self.params.dec_out.weight, l2);
            if let (Some(g), Some(p)) = (&mut grads.enc_hidden, &self.params.enc_hidden) {
                add_l2(&mut g.weight, &p.weight, l2);
            }
            if let (Some(g), Some(p)) = (&mut grads.dec_hidden, &self.params.dec_hidden) {
                add_l2(&mut g.weight, &p.weight, l2);
            }
        }
        Ok(grads)
    }

    /// Gradients of a weighted sum of per-user loss features,
    /// `sum_i coeffs[i] * L_E_i`, through the sampled forward pass in `cache`.
    /// This is the actor half of the alternating stage: the caller supplies
    /// `coeffs = -dL_A/dL_E` to ascend the critic's score.
    pub fn feature_weighted_backward(
        &self,
        cache: &ForwardCache,
        dlogits_unit: &DenseMatrix,
        coeffs: &[f64],
    ) -> Result<ActorGrads> {
        assert_eq!(coeffs.len(), dlogits_unit.rows());
        let mut dlogits = dlogits_unit.clone();
        for (i, &c) in coeffs.iter().enumerate() {
            for g in dlogits.row_mut(i) {
                *g *= c;
            }
        }
        self.backward(cache, &dlogits, 0.0, 0.0)
    }

    /// Deterministic prediction scores for ranking: the latent is the
    /// posterior mean (no sampling), so evaluation is reproducible.
    pub fn predict(&self, x_in: &DenseMatrix) -> Result<DenseMatrix> {
        let (mu, _) = self.encode(x_in)?;
        self.decode(&mu)
    }
}

/// Reparametrized sample `z = mu + exp(log_var/2) * eps`, or `z = mu` for the
/// deterministic (delta posterior) variants.
pub fn reparam_sample(
    mu: &DenseMatrix,
    log_var: &DenseMatrix,
    rng_src: &mut ChaCha8Rng,
    variational: bool,
) -> DenseMatrix {
    let mut z = mu.clone();
    if variational {
        for i in 0..z.rows() {
            let lv = log_var.row(i);
            for (k, v) in z.row_mut(i).iter_mut().enumerate() {
                *v += (lv[k] / 2.0).exp() * rng::standard_normal(rng_src);
            }
        }
    }
    z
}

/// Indices of nonzero entries in a dense binary row.
pub fn support(x: &[f64]) -> Vec<u32> {
    x.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, _)| i as u32)
        .collect()
}

fn add_l2(grad: &mut DenseMatrix, weight: &DenseMatrix, l2: f64) {
    for (g, &w) in grad.data_mut().iter_mut().zip(weight.data()) {
        *g += 2.0 * l2 * w;
    }
}

/// Flatten every parameter block into one vector, in block order.
pub fn flatten_params(params: &ActorParams) -> Vec<f64> {
    params.blocks().iter().flat_map(|(_, s)| s.iter().cloned()).collect()
}

/// Inverse of [`flatten_params`].
pub fn set_params(params: &mut ActorParams, flat: &[f64]) {
    let mut off = 0;
    for (_, block) in params.blocks_mut() {
        block.copy_from_slice(&flat[off..off + block.len()]);
        off += block.len();
    }
    assert_eq!(off, flat.len(), "flat parameter length");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff_grad, max_rel_err};
    use rand::{Rng, SeedableRng};

    const M: usize = 6;

    fn tiny_actor(config: ActorConfig) -> Actor {
        Actor::new(config, M, 42).unwrap()
    }

    fn tiny_config() -> ActorConfig {
        ActorConfig {
            latent_dim: 2,
            hidden_dim: 4,
            ..ActorConfig::vae(2, 4)
        }
    }

    fn random_batch(b: usize, seed: u64) -> (DenseMatrix, DenseMatrix) {
        // x_full binary, x_in its masked+normalized version
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x_full = DenseMatrix::zeros(b, M);
        let mut x_in = DenseMatrix::zeros(b, M);
        for i in 0..b {
            let mut kept = Vec::new();
            for j in 0..M {
                if rng.gen::<f64>() < 0.5 {
                    x_full.set(i, j, 1.0);
                    if rng.gen::<f64>() < 0.7 {
                        kept.push(j);
                    }
                }
            }
            if x_full.row(i).iter().all(|&v| v == 0.0) {
                x_full.set(i, 0, 1.0);
                kept.push(0);
            }
            let norm = (kept.len().max(1) as f64).sqrt();
            for j in kept {
                x_in.set(i, j, 1.0 / norm);
            }
        }
        (x_full, x_in)
    }

    #[test]
    fn encode_zero_input_with_zero_head_gives_standard_posterior() {
        let mut actor = tiny_actor(tiny_config());
        actor.params.enc_out = AffineLayer::zeros(4, 4);
        let x = DenseMatrix::zeros(1, M);
        let (mu, lv) = actor.encode(&x).unwrap();
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(lv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let actor = tiny_actor(tiny_config());
        let (_, x_in) = random_batch(3, 1);
        let a = actor.encode(&x_in).unwrap();
        let b = actor.encode(&x_in).unwrap();
        assert_eq!(a.0.data(), b.0.data());
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn reparam_deterministic_flag_returns_mu() {
        let mu = DenseMatrix::from_rows(&[vec![0.3, -0.7]]);
        let lv = DenseMatrix::from_rows(&[vec![0.5, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = reparam_sample(&mu, &lv, &mut rng, false);
        assert_eq!(z.data(), mu.data());
    }

    #[test]
    fn reparam_vanishing_variance_approaches_mu() {
        let mu = DenseMatrix::from_rows(&[vec![0.3, -0.7]]);
        let lv = DenseMatrix::from_rows(&[vec![-60.0, -60.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z = reparam_sample(&mu, &lv, &mut rng, true);
        for (a, b) in z.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn reparam_standard_normal_moments() {
        let n = 100_000;
        let mu = DenseMatrix::zeros(n, 1);
        let lv = DenseMatrix::zeros(n, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let z = reparam_sample(&mu, &lv, &mut rng, true);
        let mean = z.data().iter().sum::<f64>() / n as f64;
        let var = z.data().iter().map(|v| v * v).sum::<f64>() / n as f64 - mean * mean;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");
    }

    #[test]
    fn decode_zero_decoder_is_uniform() {
        let mut actor = tiny_actor(tiny_config());
        actor.params.dec_hidden = Some(AffineLayer::zeros(2, 4));
        actor.params.dec_out = AffineLayer::zeros(4, M);
        let z = DenseMatrix::from_rows(&[vec![0.5, -0.5]]);
        let pi = actor.decode(&z).unwrap();
        for &v in pi.data() {
            assert!((v - 1.0 / M as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn decode_rows_sum_to_one() {
        let actor = tiny_actor(tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut z = DenseMatrix::zeros(5, 2);
        for v in z.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let pi = actor.decode(&z).unwrap();
        for i in 0..5 {
            let s: f64 = pi.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(pi.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn beta_zero_deterministic_loss_is_nll_plus_l2() {
        let actor = tiny_actor(ActorConfig {
            variational: false,
            l2_weight: 0.01,
            ..tiny_config()
        });
        let (x_full, x_in) = random_batch(3, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = actor.elbo_loss(&x_full, &x_in, 0.0, &mut rng).unwrap();
        let mean_nll = out.output.nll.iter().sum::<f64>() / 3.0;
        let l2_term = 0.01 * actor.weight_squared_norm();
        assert!((out.loss - (mean_nll + l2_term)).abs() < 1e-12);
    }

    fn gradcheck_config(config: ActorConfig, beta: f64, tol: f64) {
        let actor = tiny_actor(config);
        let (x_full, x_in) = random_batch(3, 13);
        let mut noise_rng = ChaCha8Rng::seed_from_u64(5);
        let eps = actor.draw_noise(3, &mut noise_rng);

        let out = actor
            .elbo_loss_with_noise(&x_full, &x_in, beta, eps.clone(), None)
            .unwrap();
        let analytic: Vec<f64> = out.grads.blocks().iter().flat_map(|(_, s)| s.iter().cloned()).collect();

        let flat = flatten_params(&actor.params);
        let f = |vals: &[f64]| {
            let mut a = actor.clone();
            set_params(&mut a.params, vals);
            a.elbo_loss_with_noise(&x_full, &x_in, beta, eps.clone(), None)
                .unwrap()
                .loss
        };
        let numeric = central_diff_grad(&f, &flat, 1e-6);
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "gradient err {err} for beta {beta}");
    }

    #[test]
    fn full_elbo_gradient_check_variational() {
        gradcheck_config(tiny_config(), 0.37, 1e-4);
    }

    #[test]
    fn full_elbo_gradient_check_beta_zero_with_l2() {
        gradcheck_config(
            ActorConfig {
                variational: false,
                ..tiny_config()
            },
            0.0,
            1e-4,
        );
    }

    #[test]
    fn full_elbo_gradient_check_gaussian() {
        gradcheck_config(
            ActorConfig {
                likelihood: Likelihood::Gaussian,
                ..tiny_config()
            },
            0.2,
            1e-4,
        );
    }

    #[test]
    fn full_elbo_gradient_check_linear() {
        gradcheck_config(ActorConfig::vae_linear(2), 0.1, 1e-4);
    }

    #[test]
    fn full_elbo_gradient_check_shallow() {
        gradcheck_config(ActorConfig::dae(3), 0.0, 1e-4);
    }

    #[test]
    fn full_gradient_check_bpr_loss() {
        gradcheck_config(
            ActorConfig {
                loss_kind: LossKind::Bpr,
                variational: false,
                ..tiny_config()
            },
            0.0,
            1e-4,
        );
    }

    #[test]
    fn loss_decreases_when_overfitting_one_batch() {
        use crate::nn::{adam_step, AdamHyper, AdamState};
        let mut actor = tiny_actor(tiny_config());
        let (x_full, x_in) = random_batch(4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut states: Vec<AdamState> = actor
            .params
            .blocks()
            .iter()
            .map(|(_, s)| AdamState::new(s.len(), AdamHyper::default()))
            .collect();
        let first = actor.elbo_loss(&x_full, &x_in, 0.1, &mut rng).unwrap().loss;
        let mut last = first;
        for _ in 0..200 {
            let out = actor.elbo_loss(&x_full, &x_in, 0.1, &mut rng).unwrap();
            let grad_blocks = out.grads.blocks();
            for ((idx, (pname, pblock)), (gname, gblock)) in
                actor.params.blocks_mut().into_iter().enumerate().zip(grad_blocks.iter())
            {
                assert_eq!(&pname, gname);
                adam_step(&pname, pblock, gblock, &mut states[idx]).unwrap();
            }
            last = out.loss;
        }
        assert!(
            last < first,
            "loss did not decrease: first {first}, last {last}"
        );
    }

    #[test]
    fn predict_is_deterministic_and_finite() {
        let actor = tiny_actor(tiny_config());
        let (_, x_in) = random_batch(3, 17);
        let a = actor.predict(&x_in).unwrap();
        let b = actor.predict(&x_in).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.is_finite());
    }

    #[test]
    fn zero_model_prediction_is_uniform() {
        let mut actor = tiny_actor(tiny_config());
        actor.params.dec_hidden = Some(AffineLayer::zeros(2, 4));
        actor.params.dec_out = AffineLayer::zeros(4, M);
        let (_, x_in) = random_batch(1, 23);
        let pi = actor.predict(&x_in).unwrap();
        for &v in pi.data() {
            assert!((v - 1.0 / M as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn fingerprint_changes_with_parameters() {
        let actor = tiny_actor(tiny_config());
        let fp = actor.params.fingerprint();
        let mut other = actor.clone();
        other.params.enc_out.bias[0] += 1e-9;
        assert_ne!(fp, other.params.fingerprint());
        assert_eq!(fp, actor.params.fingerprint());
    }
}
