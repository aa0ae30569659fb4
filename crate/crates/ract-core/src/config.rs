//! Flat key=value run configuration with strict unknown-key rejection.
//! Missing keys fall back to documented defaults; the fully resolved
//! configuration is echoed into the run directory so every run is
//! self-describing.

use std::collections::BTreeMap;
use std::path::Path;

use crate::actor::{ActorConfig, Likelihood, LossKind, WarpMode};
use crate::critic::CriticFeatureSet;
use crate::error::{Error, Result};
use crate::nn::AdamHyper;
use crate::ranking::{MetricKind, MetricSpec};
use crate::trainer::TrainSchedule;

/// Validation/test holdout sizes: explicit user counts, or 10% of users each
/// when left on auto.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldoutSize {
    Auto,
    Count(usize),
}

impl HoldoutSize {
    pub fn resolve(&self, n_users: usize) -> usize {
        match self {
            HoldoutSize::Auto => (n_users / 10).max(1),
            HoldoutSize::Count(c) => *c,
        }
    }
}

/// All run settings as one flat document. String keys match the field names
/// below; see `RunConfig::default()` for the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: String,
    pub run_dir: String,

    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub likelihood: Likelihood,
    pub variational: bool,
    pub linear: bool,
    pub shallow: bool,
    pub l2_weight: f64,
    pub loss_kind: LossKind,
    pub warp_mode: WarpMode,

    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub beta_max: f64,
    pub anneal_epochs: usize,
    pub fix_epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,

    pub critic_metric: MetricKind,
    pub critic_cutoff: usize,
    pub critic_features: CriticFeatureSet,

    pub mask_alpha: f64,
    pub holdout_fraction: f64,
    pub n_heldout_val: HoldoutSize,
    pub n_heldout_test: HoldoutSize,
    pub normalize_input: bool,

    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: String::new(),
            run_dir: String::new(),
            latent_dim: 200,
            hidden_dim: 600,
            likelihood: Likelihood::Multinomial,
            variational: true,
            linear: false,
            shallow: false,
            l2_weight: 0.01,
            loss_kind: LossKind::Mle,
            warp_mode: WarpMode::Exact,
            stage1_epochs: 40,
            stage2_epochs: 10,
            stage3_epochs: 15,
            beta_max: 0.2,
            anneal_epochs: 25,
            fix_epochs: 15,
            batch_size: 250,
            eval_every: 1,
            seed: 1,
            critic_metric: MetricKind::Ndcg,
            critic_cutoff: 100,
            critic_features: CriticFeatureSet::Full,
            mask_alpha: 0.5,
            holdout_fraction: 0.2,
            n_heldout_val: HoldoutSize::Auto,
            n_heldout_test: HoldoutSize::Auto,
            normalize_input: true,
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::InvalidConfig(format!(
                    "line {}: expected key = value, got `{raw}`",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::InvalidConfig(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("invalid value `{value}` for `{key}`")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool> {
            match value {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(Error::InvalidConfig(format!(
                    "invalid boolean `{value}` for `{key}`"
                ))),
            }
        }
        fn parse_holdout(key: &str, value: &str) -> Result<HoldoutSize> {
            if value == "auto" {
                Ok(HoldoutSize::Auto)
            } else {
                Ok(HoldoutSize::Count(parse(key, value)?))
            }
        }
        match key {
            "data" => self.data = value.to_string(),
            "run_dir" => self.run_dir = value.to_string(),
            "latent_dim" => self.latent_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "likelihood" => {
                self.likelihood = match value {
                    "multinomial" => Likelihood::Multinomial,
                    "gaussian" => Likelihood::Gaussian,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "invalid likelihood `{value}` (multinomial | gaussian)"
                        )))
                    }
                }
            }
            "variational" => self.variational = parse_bool(key, value)?,
            "linear" => self.linear = parse_bool(key, value)?,
            "shallow" => self.shallow = parse_bool(key, value)?,
            "l2_weight" => self.l2_weight = parse(key, value)?,
            "loss_kind" => {
                self.loss_kind = match value {
                    "mle" => LossKind::Mle,
                    "bpr" => LossKind::Bpr,
                    "warp" => LossKind::Warp,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "invalid loss_kind `{value}` (mle | bpr | warp)"
                        )))
                    }
                }
            }
            "warp_mode" => {
                self.warp_mode = match value {
                    "exact" => WarpMode::Exact,
                    "sampled" => WarpMode::Sampled,
                    _ => {
                        return Err(Error::InvalidConfig(format!(
                            "invalid warp_mode `{value}` (exact | sampled)"
                        )))
                    }
                }
            }
            "stage1_epochs" => self.stage1_epochs = parse(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, value)?,
            "stage3_epochs" => self.stage3_epochs = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "anneal_epochs" => self.anneal_epochs = parse(key, value)?,
            "fix_epochs" => self.fix_epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "critic_metric" => self.critic_metric = value.parse()?,
            "critic_cutoff" => self.critic_cutoff = parse(key, value)?,
            "critic_features" => self.critic_features = CriticFeatureSet::parse(value)?,
            "mask_alpha" => self.mask_alpha = parse(key, value)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, value)?,
            "n_heldout_val" => self.n_heldout_val = parse_holdout(key, value)?,
            "n_heldout_test" => self.n_heldout_test = parse_holdout(key, value)?,
            "normalize_input" => self.normalize_input = parse_bool(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            unknown => {
                return Err(Error::InvalidConfig(format!("unknown key `{unknown}`")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.anneal_epochs + self.fix_epochs != self.stage1_epochs {
            return Err(Error::InvalidConfig(format!(
                "anneal_epochs ({}) + fix_epochs ({}) must equal stage1_epochs ({})",
                self.anneal_epochs, self.fix_epochs, self.stage1_epochs
            )));
        }
        if self.beta_max < 0.0 {
            return Err(Error::InvalidConfig("beta_max must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if self.critic_cutoff == 0 {
            return Err(Error::InvalidConfig("critic_cutoff must be >= 1".into()));
        }
        if !(self.mask_alpha > 0.0 && self.mask_alpha <= 1.0) {
            return Err(Error::InvalidConfig("mask_alpha must be in (0, 1]".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "holdout_fraction must be in (0, 1)".into(),
            ));
        }
        self.actor_config().validate()
    }

    pub fn actor_config(&self) -> ActorConfig {
        ActorConfig {
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            likelihood: self.likelihood,
            variational: self.variational,
            linear: self.linear,
            shallow: self.shallow,
            l2_weight: self.l2_weight,
            loss_kind: self.loss_kind,
            warp_mode: self.warp_mode,
        }
    }

    pub fn schedule(&self) -> TrainSchedule {
        TrainSchedule {
            stage1_epochs: self.stage1_epochs,
            stage2_epochs: self.stage2_epochs,
            stage3_epochs: self.stage3_epochs,
            beta_max: self.beta_max,
            anneal_epochs: self.anneal_epochs,
            fix_epochs: self.fix_epochs,
            batch_size: self.batch_size,
            eval_every: self.eval_every,
            seed: self.seed,
            critic_metric: MetricSpec {
                kind: self.critic_metric,
                cutoff: self.critic_cutoff,
            },
        }
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// All settings as sorted `key = value` pairs, with holdout sizes
    /// resolved against the actual user count.
    pub fn resolved_pairs(&self, n_users: usize) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("data", self.data.clone());
        put("run_dir", self.run_dir.clone());
        put("latent_dim", self.latent_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put(
            "likelihood",
            match self.likelihood {
                Likelihood::Multinomial => "multinomial".into(),
                Likelihood::Gaussian => "gaussian".into(),
            },
        );
        put("variational", self.variational.to_string());
        put("linear", self.linear.to_string());
        put("shallow", self.shallow.to_string());
        put("l2_weight", self.l2_weight.to_string());
        put(
            "loss_kind",
            match self.loss_kind {
                LossKind::Mle => "mle".into(),
                LossKind::Bpr => "bpr".into(),
                LossKind::Warp => "warp".into(),
            },
        );
        put(
            "warp_mode",
            match self.warp_mode {
                WarpMode::Exact => "exact".into(),
                WarpMode::Sampled => "sampled".into(),
            },
        );
        put("stage1_epochs", self.stage1_epochs.to_string());
        put("stage2_epochs", self.stage2_epochs.to_string());
        put("stage3_epochs", self.stage3_epochs.to_string());
        put("beta_max", self.beta_max.to_string());
        put("anneal_epochs", self.anneal_epochs.to_string());
        put("fix_epochs", self.fix_epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("eval_every", self.eval_every.to_string());
        put("seed", self.seed.to_string());
        put(
            "critic_metric",
            match self.critic_metric {
                MetricKind::Ndcg => "ndcg".into(),
                MetricKind::Recall => "recall".into(),
            },
        );
        put("critic_cutoff", self.critic_cutoff.to_string());
        put("critic_features", self.critic_features.name().to_string());
        put("mask_alpha", self.mask_alpha.to_string());
        put("holdout_fraction", self.holdout_fraction.to_string());
        put(
            "n_heldout_val",
            self.n_heldout_val.resolve(n_users).to_string(),
        );
        put(
            "n_heldout_test",
            self.n_heldout_test.resolve(n_users).to_string(),
        );
        put("normalize_input", self.normalize_input.to_string());
        put("lr", self.lr.to_string());
        put("adam_beta1", self.adam_beta1.to_string());
        put("adam_beta2", self.adam_beta2.to_string());
        put("adam_eps", self.adam_eps.to_string());
        kv
    }

    pub fn resolved_text(&self, n_users: usize) -> String {
        let mut out = String::new();
        for (k, v) in self.resolved_pairs(n_users) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Rebuild a config from resolved pairs (as stored in checkpoints).
    pub fn from_pairs<'a>(pairs: impl Iterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
