//! The three-stage training procedure: actor pre-training with KL annealing,
//! critic pre-training against the ranking oracle, then alternating
//! actor/critic updates. Deterministic end to end: every random stream is
//! derived from `(seed, global epoch, purpose)`, so runs are bit-for-bit
//! reproducible and checkpoints resume exactly.

pub mod checkpoint;
pub mod eval;
pub mod metrics_log;

use std::path::Path;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::actor::{support, Actor, ActorParams};
use crate::config::RunConfig;
use crate::critic::{actor_objective, critic_mse, oracle_targets_for_batch, Critic, CriticFeatures};
use crate::data::{batch_iter, densify_row, sample_mask, split_users, MaskConfig, SplitSpec};
use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamState, DenseMatrix};
use crate::ranking::MetricSpec;
use crate::rng;

pub use checkpoint::Checkpoint;
pub use eval::{activity_breakdown, evaluate, ActivityBucket, EvalReport, EvalRow, FoldInConfig};
pub use metrics_log::{EpochRecord, MetricsLog, CSV_HEADER};

/// Stage lengths, annealing schedule and batch settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub stage3_epochs: usize,
    pub beta_max: f64,
    pub anneal_epochs: usize,
    pub fix_epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub critic_metric: MetricSpec,
}

impl TrainSchedule {
    /// The full-scale reference schedule (batch 500, 150/50/50 epochs,
    /// beta ramped over 100 epochs then fixed at 0.2).
    pub fn full_scale() -> Self {
        Self {
            stage1_epochs: 150,
            stage2_epochs: 50,
            stage3_epochs: 50,
            beta_max: 0.2,
            anneal_epochs: 100,
            fix_epochs: 50,
            batch_size: 500,
            eval_every: 1,
            seed: 1,
            critic_metric: MetricSpec::ndcg(100),
        }
    }

    /// Desk-scale default: proportionally shrunk stages for synthetic data.
    pub fn desk() -> Self {
        Self {
            stage1_epochs: 40,
            stage2_epochs: 10,
            stage3_epochs: 15,
            beta_max: 0.2,
            anneal_epochs: 25,
            fix_epochs: 15,
            batch_size: 250,
            eval_every: 1,
            seed: 1,
            critic_metric: MetricSpec::ndcg(20),
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.stage1_epochs + self.stage2_epochs + self.stage3_epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.anneal_epochs + self.fix_epochs != self.stage1_epochs {
            return Err(Error::InvalidConfig(
                "anneal_epochs + fix_epochs must equal stage1_epochs".into(),
            ));
        }
        if self.beta_max < 0.0 {
            return Err(Error::InvalidConfig("beta_max must be >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be >= 2".into()));
        }
        Ok(())
    }
}

/// Per-row `(observed, heldout)` supports of one sampled mask.
type MaskPair = (Vec<u32>, Vec<u32>);

/// Linear ramp to `beta_max` over the annealing epochs, then constant.
/// `epoch` is 0-based within stage 1.
pub fn beta_at_epoch(schedule: &TrainSchedule, epoch: usize) -> f64 {
    debug_assert!(epoch < schedule.stage1_epochs.max(1));
    if schedule.anneal_epochs == 0 {
        return schedule.beta_max;
    }
    let ramp = ((epoch + 1) as f64 / schedule.anneal_epochs as f64).min(1.0);
    schedule.beta_max * ramp
}

/// Best-validation snapshot tracked across the run.
#[derive(Debug, Clone)]
pub struct BestSnapshot {
    pub score: f64,
    pub stage: u8,
    pub epoch: usize,
    pub actor_params: ActorParams,
    pub critic: Critic,
}

/// Owns the models, optimizer states and data split for one training run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub schedule: TrainSchedule,
    full: InteractionMatrix,
    train: InteractionMatrix,
    pub val_users: Vec<usize>,
    pub test_users: Vec<usize>,
    pub actor: Actor,
    pub critic: Critic,
    actor_opt: Vec<AdamState>,
    critic_opt: Vec<AdamState>,
    pub log: MetricsLog,
    pub best: Option<BestSnapshot>,
    global_epoch: usize,
    /// Rows dropped from critic/ranking batches because the sampled mask hid
    /// nothing (|H0| = 0).
    pub dropped_rows: u64,
    /// Actor or critic half-steps skipped because fewer than two evaluable
    /// rows remained in the batch.
    pub skipped_half_steps: u64,
    /// Alternating-stage update counts; equal unless half-steps were skipped.
    pub stage3_actor_steps: u64,
    pub stage3_critic_steps: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig, full: InteractionMatrix) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule();
        schedule.validate()?;
        if schedule.critic_metric.cutoff > full.n_items() {
            return Err(Error::InvalidConfig(format!(
                "critic cutoff {} exceeds item count {}",
                schedule.critic_metric.cutoff,
                full.n_items()
            )));
        }
        let n_users = full.n_users();
        let split = split_users(
            &full,
            &SplitSpec {
                n_heldout_val: cfg.n_heldout_val.resolve(n_users),
                n_heldout_test: cfg.n_heldout_test.resolve(n_users),
                seed: cfg.seed,
            },
        )?;
        let actor = Actor::new(cfg.actor_config(), full.n_items(), cfg.seed)?;
        let critic = Critic::new(cfg.critic_features, cfg.seed);
        let actor_opt = actor
            .params
            .blocks()
            .iter()
            .map(|(_, s)| AdamState::new(s.len(), cfg.adam_hyper()))
            .collect();
        let critic_opt = critic
            .blocks()
            .iter()
            .map(|(_, s)| AdamState::new(s.len(), cfg.adam_hyper()))
            .collect();
        Ok(Self {
            schedule,
            train: split.train,
            val_users: split.val,
            test_users: split.test,
            actor,
            critic,
            actor_opt,
            critic_opt,
            log: MetricsLog::default(),
            best: None,
            global_epoch: 0,
            dropped_rows: 0,
            skipped_half_steps: 0,
            stage3_actor_steps: 0,
            stage3_critic_steps: 0,
            full,
            cfg,
        })
    }

    pub fn global_epoch(&self) -> usize {
        self.global_epoch
    }

    pub fn finished(&self) -> bool {
        self.global_epoch >= self.schedule.total_epochs()
    }

    /// Stage (1..=3) and 0-based epoch within it for a global epoch index.
    fn position(&self, global: usize) -> (u8, usize) {
        let s = &self.schedule;
        if global < s.stage1_epochs {
            (1, global)
        } else if global < s.stage1_epochs + s.stage2_epochs {
            (2, global - s.stage1_epochs)
        } else {
            (3, global - s.stage1_epochs - s.stage2_epochs)
        }
    }

    pub fn fold_in_config(&self) -> FoldInConfig {
        FoldInConfig {
            fraction: self.cfg.holdout_fraction,
            seed: self.cfg.seed,
        }
    }

    fn eval_metrics(&self) -> [MetricSpec; 2] {
        let cutoff = self.schedule.critic_metric.cutoff;
        [MetricSpec::ndcg(cutoff), MetricSpec::recall(cutoff)]
    }

    /// Run every remaining epoch, invoking `on_epoch` after each record.
    pub fn run<F: FnMut(&EpochRecord)>(&mut self, mut on_epoch: F) -> Result<()> {
        while !self.finished() {
            let rec = self.run_one_epoch()?;
            on_epoch(&rec);
        }
        Ok(())
    }

    /// Run at most `n` epochs; returns true when the schedule is complete.
    pub fn run_epochs(&mut self, n: usize) -> Result<bool> {
        for _ in 0..n {
            if self.finished() {
                break;
            }
            self.run_one_epoch()?;
        }
        Ok(self.finished())
    }

    fn run_one_epoch(&mut self) -> Result<EpochRecord> {
        let started = Instant::now();
        let global = self.global_epoch;
        let (stage, in_stage) = self.position(global);
        let (train_loss, critic_mse_val) = match stage {
            1 => self.stage1_epoch(in_stage)?,
            2 => self.stage2_epoch()?,
            3 => self.stage3_epoch()?,
            _ => unreachable!(),
        };

        let stage_len = match stage {
            1 => self.schedule.stage1_epochs,
            2 => self.schedule.stage2_epochs,
            _ => self.schedule.stage3_epochs,
        };
        let do_eval =
            (in_stage + 1) % self.schedule.eval_every == 0 || in_stage + 1 == stage_len;
        let (val_ndcg, val_recall) = if do_eval && !self.val_users.is_empty() {
            let report = evaluate(
                &self.actor,
                &self.full,
                &self.val_users,
                &self.fold_in_config(),
                &self.eval_metrics(),
                self.cfg.normalize_input,
            )?;
            (report.means[0], report.means[1])
        } else {
            (f64::NAN, f64::NAN)
        };

        self.global_epoch += 1;
        let epoch = self.global_epoch;
        if val_ndcg.is_finite()
            && self.best.as_ref().map(|b| val_ndcg > b.score).unwrap_or(true)
        {
            self.best = Some(BestSnapshot {
                score: val_ndcg,
                stage,
                epoch,
                actor_params: self.actor.params.clone(),
                critic: self.critic.clone(),
            });
        }

        let rec = EpochRecord {
            stage,
            epoch,
            train_loss,
            val_ndcg,
            val_recall,
            critic_mse: critic_mse_val,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    fn epoch_rngs(&self, global: usize) -> (ChaCha8Rng, ChaCha8Rng, ChaCha8Rng) {
        let seed = self.cfg.seed;
        let mask_rng = rng::rng_from(seed, rng::stream::MASK, global as u64, 0);
        let noise_rng = rng::rng_from(seed, rng::stream::NOISE, global as u64, 0);
        let loss_rng = rng::rng_from(seed, rng::stream::LOSS, global as u64, 0);
        (mask_rng, noise_rng, loss_rng)
    }

    fn epoch_batches(&self, global: usize) -> Vec<Vec<usize>> {
        let users: Vec<usize> = (0..self.train.n_users()).collect();
        let epoch_seed = rng::mix_seed(self.cfg.seed, rng::stream::SHUFFLE, global as u64, 1);
        batch_iter(&users, self.schedule.batch_size, epoch_seed)
    }

    /// Densify one batch: full binary targets and masked (normalized) inputs.
    /// Returns per-row masked supports alongside the matrices.
    fn densify_batch(
        &self,
        batch: &[usize],
        mask_rng: &mut ChaCha8Rng,
    ) -> (DenseMatrix, DenseMatrix, Vec<MaskPair>) {
        let m = self.train.n_items();
        let mask_cfg = MaskConfig {
            alpha: self.cfg.mask_alpha,
        };
        let mut x_full_rows = Vec::with_capacity(batch.len());
        let mut x_in_rows = Vec::with_capacity(batch.len());
        let mut masks = Vec::with_capacity(batch.len());
        for &u in batch {
            let row = self.train.row(u);
            let masked = sample_mask(row, &mask_cfg, mask_rng);
            x_full_rows.push(densify_row(row, m, false));
            x_in_rows.push(densify_row(&masked.observed, m, self.cfg.normalize_input));
            masks.push((masked.observed, masked.heldout));
        }
        (
            DenseMatrix::from_rows(&x_full_rows),
            DenseMatrix::from_rows(&x_in_rows),
            masks,
        )
    }

    fn stage1_epoch(&mut self, in_stage: usize) -> Result<(f64, f64)> {
        let global = self.global_epoch;
        let beta = beta_at_epoch(&self.schedule, in_stage);
        let (mut mask_rng, mut noise_rng, mut loss_rng) = self.epoch_rngs(global);
        let mut loss_sum = 0.0;
        let batches = self.epoch_batches(global);
        let n_batches = batches.len();
        for batch in batches {
            let (x_full, x_in, _) = self.densify_batch(&batch, &mut mask_rng);
            let eps = self.actor.draw_noise(batch.len(), &mut noise_rng);
            let out = self
                .actor
                .elbo_loss_with_noise(&x_full, &x_in, beta, eps, Some(&mut loss_rng))
                .map_err(|e| stage_error(1, global, &batch, e))?;
            if !out.loss.is_finite() {
                return Err(stage_error(
                    1,
                    global,
                    &batch,
                    Error::NonFinite("stage-1 loss".into()),
                ));
            }
            loss_sum += out.loss;
            let grads = out.grads;
            apply_adam(
                self.actor.params.blocks_mut(),
                grads.blocks(),
                &mut self.actor_opt,
            )?;
        }
        Ok((loss_sum / n_batches.max(1) as f64, f64::NAN))
    }

    /// Rows of a masked batch usable for critic training: the mask must have
    /// hidden at least one interaction (|H0| >= 1), otherwise no oracle
    /// target exists and the row is dropped.
    fn evaluable_rows(&mut self, masks: &[MaskPair]) -> Vec<usize> {
        let mut keep = Vec::with_capacity(masks.len());
        for (i, (_, heldout)) in masks.iter().enumerate() {
            if heldout.is_empty() {
                self.dropped_rows += 1;
            } else {
                keep.push(i);
            }
        }
        keep
    }

    fn features_for(le: &[f64], masks: &[MaskPair], keep: &[usize]) -> Vec<CriticFeatures> {
        keep.iter()
            .map(|&i| CriticFeatures {
                nll: le[i],
                n_heldout: masks[i].1.len(),
                n_observed: masks[i].0.len(),
            })
            .collect()
    }

    /// Exact metric targets for the kept rows of one forward pass.
    fn oracle_targets(
        &self,
        cache: &crate::actor::ForwardCache,
        x_full: &DenseMatrix,
        masks: &[MaskPair],
        keep: &[usize],
    ) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = keep.iter().map(|&i| cache.pi.row(i).to_vec()).collect();
        let predictions = DenseMatrix::from_rows(&rows);
        let targets: Vec<Vec<u32>> = keep.iter().map(|&i| support(x_full.row(i))).collect();
        let observed: Vec<Vec<u32>> = keep.iter().map(|&i| masks[i].0.clone()).collect();
        oracle_targets_for_batch(&predictions, &targets, &observed, self.schedule.critic_metric)
    }

    fn critic_update(&mut self, features: &[CriticFeatures], targets: &[f64]) -> Result<f64> {
        let input = self.critic.input_matrix(features);
        let cache = self.critic.forward_train(&input)?;
        let (mse, d_yhat) = critic_mse(&cache.yhat, targets);
        if !mse.is_finite() {
            return Err(Error::NonFinite("critic MSE".into()));
        }
        let (grads, _) = self.critic.backward(&cache, &d_yhat)?;
        apply_adam(self.critic.blocks_mut(), grads.blocks(), &mut self.critic_opt)?;
        Ok(mse)
    }

    fn stage2_epoch(&mut self) -> Result<(f64, f64)> {
        let global = self.global_epoch;
        let actor_fp = self.actor.params.fingerprint();
        let (mut mask_rng, mut noise_rng, mut loss_rng) = self.epoch_rngs(global);
        let mut mse_sum = 0.0;
        let mut n_steps = 0usize;
        for batch in self.epoch_batches(global) {
            let (x_full, x_in, masks) = self.densify_batch(&batch, &mut mask_rng);
            let eps = self.actor.draw_noise(batch.len(), &mut noise_rng);
            let cache = self
                .actor
                .forward_with_noise(&x_in, eps)
                .map_err(|e| stage_error(2, global, &batch, e))?;
            let (le, _) = self.actor.eval_loss_feature(&cache, &x_full, Some(&mut loss_rng));
            let keep = self.evaluable_rows(&masks);
            if keep.len() < 2 {
                self.skipped_half_steps += 1;
                continue;
            }
            let features = Self::features_for(&le, &masks, &keep);
            let targets = self.oracle_targets(&cache, &x_full, &masks, &keep)?;
            let mse = self
                .critic_update(&features, &targets)
                .map_err(|e| stage_error(2, global, &batch, e))?;
            mse_sum += mse;
            n_steps += 1;
            // the actor must stay frozen through every critic step
            if self.actor.params.fingerprint() != actor_fp {
                return Err(Error::Training(
                    "actor parameters changed during critic pre-training".into(),
                ));
            }
        }
        let mean = mse_sum / n_steps.max(1) as f64;
        Ok((mean, mean))
    }

    fn stage3_epoch(&mut self) -> Result<(f64, f64)> {
        let global = self.global_epoch;
        let (mut mask_rng, mut noise_rng, mut loss_rng) = self.epoch_rngs(global);
        let mut objective_sum = 0.0;
        let mut n_actor_steps = 0usize;
        let mut mse_sum = 0.0;
        let mut n_critic_steps = 0usize;

        for batch in self.epoch_batches(global) {
            // one mask and one noise draw per user per iteration, shared by
            // the actor and critic halves of the step
            let (x_full, x_in, masks) = self.densify_batch(&batch, &mut mask_rng);
            let eps = self.actor.draw_noise(batch.len(), &mut noise_rng);
            let keep = self.evaluable_rows(&masks);

            // actor step: ascend the critic's score with the critic frozen
            let cache = self
                .actor
                .forward_with_noise(&x_in, eps.clone())
                .map_err(|e| stage_error(3, global, &batch, e))?;
            let (le, dlogits_unit) =
                self.actor.eval_loss_feature(&cache, &x_full, Some(&mut loss_rng));
            if keep.len() >= 2 {
                let features = Self::features_for(&le, &masks, &keep);
                let critic_fp = self.critic.fingerprint_learnable();
                let obj = actor_objective(&mut self.critic, &features)?;
                if self.critic.fingerprint_learnable() != critic_fp {
                    return Err(Error::Training(
                        "critic parameters changed during an actor step".into(),
                    ));
                }
                // ascend: negate the chain coefficients; dropped rows get 0
                let dnll = obj.dnll();
                let mut coeffs = vec![0.0; batch.len()];
                for (slot, &row) in keep.iter().enumerate() {
                    coeffs[row] = -dnll[slot];
                }
                let grads = self
                    .actor
                    .feature_weighted_backward(&cache, &dlogits_unit, &coeffs)?;
                apply_adam(
                    self.actor.params.blocks_mut(),
                    grads.blocks(),
                    &mut self.actor_opt,
                )?;
                objective_sum += obj.value;
                n_actor_steps += 1;
                self.stage3_actor_steps += 1;
            } else {
                self.skipped_half_steps += 1;
            }

            // critic step: same mask and noise, fresh forward of the updated
            // actor, fresh oracle targets for its shifted predictions
            let actor_fp = self.actor.params.fingerprint();
            if keep.len() >= 2 {
                let cache2 = self
                    .actor
                    .forward_with_noise(&x_in, eps)
                    .map_err(|e| stage_error(3, global, &batch, e))?;
                let (le2, _) =
                    self.actor.eval_loss_feature(&cache2, &x_full, Some(&mut loss_rng));
                let features2 = Self::features_for(&le2, &masks, &keep);
                let targets2 = self.oracle_targets(&cache2, &x_full, &masks, &keep)?;
                let mse = self
                    .critic_update(&features2, &targets2)
                    .map_err(|e| stage_error(3, global, &batch, e))?;
                mse_sum += mse;
                n_critic_steps += 1;
                self.stage3_critic_steps += 1;
            } else {
                self.skipped_half_steps += 1;
            }
            if self.actor.params.fingerprint() != actor_fp {
                return Err(Error::Training(
                    "actor parameters changed during a critic step".into(),
                ));
            }
        }
        Ok((
            objective_sum / n_actor_steps.max(1) as f64,
            mse_sum / n_critic_steps.max(1) as f64,
        ))
    }
}

impl Trainer {
    /// Full training state as a checkpoint: resolved config, current and
    /// best parameters, optimizer moments and the metrics log.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.kv.insert("kind".into(), "train-state".into());
        for (k, v) in self.cfg.resolved_pairs(self.full.n_users()) {
            c.kv.insert(format!("cfg.{k}"), v);
        }
        c.kv.insert("meta.n_items".into(), self.full.n_items().to_string());
        c.kv
            .insert("meta.global_epoch".into(), self.global_epoch.to_string());
        c.kv
            .insert("meta.dropped_rows".into(), self.dropped_rows.to_string());
        c.kv.insert(
            "meta.skipped_half_steps".into(),
            self.skipped_half_steps.to_string(),
        );
        c.kv.insert(
            "meta.stage3_actor_steps".into(),
            self.stage3_actor_steps.to_string(),
        );
        c.kv.insert(
            "meta.stage3_critic_steps".into(),
            self.stage3_critic_steps.to_string(),
        );
        c.kv.insert("meta.metrics_csv".into(), self.log.to_csv());

        checkpoint::put_actor(&mut c, "", &self.actor.params);
        checkpoint::put_critic(&mut c, "", &self.critic);
        for ((name, _), state) in self.actor.params.blocks().iter().zip(&self.actor_opt) {
            checkpoint::put_adam(&mut c, &format!("opt.{name}"), state);
        }
        for ((name, _), state) in self.critic.blocks().iter().zip(&self.critic_opt) {
            checkpoint::put_adam(&mut c, &format!("opt.{name}"), state);
        }
        if let Some(best) = &self.best {
            c.kv.insert("meta.best_score".into(), best.score.to_string());
            c.kv.insert("meta.best_stage".into(), best.stage.to_string());
            c.kv.insert("meta.best_epoch".into(), best.epoch.to_string());
            checkpoint::put_actor(&mut c, "best.", &best.actor_params);
            checkpoint::put_critic(&mut c, "best.", &best.critic);
        }
        c
    }

    /// Model-only checkpoint holding the best-validation parameters (falls
    /// back to the current parameters when no evaluation has run yet).
    pub fn best_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.kv.insert("kind".into(), "model".into());
        for (k, v) in self.cfg.resolved_pairs(self.full.n_users()) {
            c.kv.insert(format!("cfg.{k}"), v);
        }
        c.kv.insert("meta.n_items".into(), self.full.n_items().to_string());
        match &self.best {
            Some(best) => {
                c.kv.insert("meta.best_score".into(), best.score.to_string());
                c.kv.insert("meta.best_stage".into(), best.stage.to_string());
                c.kv.insert("meta.best_epoch".into(), best.epoch.to_string());
                checkpoint::put_actor(&mut c, "", &best.actor_params);
                checkpoint::put_critic(&mut c, "", &best.critic);
            }
            None => {
                checkpoint::put_actor(&mut c, "", &self.actor.params);
                checkpoint::put_critic(&mut c, "", &self.critic);
            }
        }
        c
    }

    /// Rebuild a trainer from a train-state checkpoint and the full dataset.
    /// The split, schedule and random streams are re-derived from the stored
    /// config, so continuing reproduces the uninterrupted run bit for bit.
    pub fn resume(ckpt: &Checkpoint, full: InteractionMatrix) -> Result<Self> {
        if ckpt.get("kind")? != "train-state" {
            return Err(Error::Checkpoint(
                "not a train-state checkpoint (was it saved as a model?)".into(),
            ));
        }
        let cfg = config_from_checkpoint(ckpt)?;
        let n_items: usize = ckpt.get_parsed("meta.n_items")?;
        if n_items != full.n_items() {
            return Err(Error::Checkpoint(format!(
                "item count mismatch: checkpoint has {n_items}, data has {}",
                full.n_items()
            )));
        }
        let mut t = Trainer::new(cfg, full)?;
        t.actor.params = checkpoint::get_actor(ckpt, "", &t.actor.config, n_items)?;
        t.critic = checkpoint::get_critic(ckpt, "", t.cfg.critic_features)?;
        let hyper = t.cfg.adam_hyper();
        t.actor_opt = t
            .actor
            .params
            .blocks()
            .iter()
            .map(|(name, s)| checkpoint::get_adam(ckpt, &format!("opt.{name}"), s.len(), hyper))
            .collect::<Result<_>>()?;
        t.critic_opt = t
            .critic
            .blocks()
            .iter()
            .map(|(name, s)| checkpoint::get_adam(ckpt, &format!("opt.{name}"), s.len(), hyper))
            .collect::<Result<_>>()?;
        t.global_epoch = ckpt.get_parsed("meta.global_epoch")?;
        t.dropped_rows = ckpt.get_parsed("meta.dropped_rows")?;
        t.skipped_half_steps = ckpt.get_parsed("meta.skipped_half_steps")?;
        t.stage3_actor_steps = ckpt.get_parsed("meta.stage3_actor_steps")?;
        t.stage3_critic_steps = ckpt.get_parsed("meta.stage3_critic_steps")?;
        t.log = MetricsLog::parse_csv(ckpt.get("meta.metrics_csv")?)?;
        if ckpt.kv.contains_key("meta.best_score") {
            t.best = Some(BestSnapshot {
                score: ckpt.get_parsed("meta.best_score")?,
                stage: ckpt.get_parsed("meta.best_stage")?,
                epoch: ckpt.get_parsed("meta.best_epoch")?,
                actor_params: checkpoint::get_actor(ckpt, "best.", &t.actor.config, n_items)?,
                critic: checkpoint::get_critic(ckpt, "best.", t.cfg.critic_features)?,
            });
        }
        Ok(t)
    }

    /// Write the run directory contract: `config.resolved`, `metrics.csv`,
    /// `best.ckpt` and `final.ckpt`.
    pub fn write_run_outputs(&self, run_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(run_dir)?;
        std::fs::write(
            run_dir.join("config.resolved"),
            self.cfg.resolved_text(self.full.n_users()),
        )?;
        self.log.write_csv(&run_dir.join("metrics.csv"))?;
        self.best_checkpoint().save(&run_dir.join("best.ckpt"))?;
        self.to_checkpoint().save(&run_dir.join("final.ckpt"))?;
        Ok(())
    }
}

/// Rebuild the run configuration stored under `cfg.*` keys.
pub fn config_from_checkpoint(ckpt: &Checkpoint) -> Result<RunConfig> {
    RunConfig::from_pairs(
        ckpt.kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("cfg.").map(|key| (key, v.as_str()))),
    )
}

fn stage_error(stage: u8, epoch: usize, batch: &[usize], e: Error) -> Error {
    Error::Training(format!(
        "stage {stage}, epoch {epoch}, batch of {} users (first user {:?}): {e}",
        batch.len(),
        batch.first()
    ))
}

fn apply_adam(
    params: Vec<(String, &mut [f64])>,
    grads: Vec<(String, &[f64])>,
    states: &mut [AdamState],
) -> Result<()> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), states.len());
    for (((pname, pblock), (gname, gblock)), state) in
        params.into_iter().zip(grads).zip(states.iter_mut())
    {
        debug_assert_eq!(pname, gname);
        adam_step(&pname, pblock, gblock, state)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use metrics_log::csv_without_wall;

    #[test]
    fn beta_schedule_values() {
        let mut s = TrainSchedule::full_scale();
        assert!((beta_at_epoch(&s, 0) - 0.002).abs() < 1e-15);
        assert!((beta_at_epoch(&s, 99) - 0.2).abs() < 1e-15);
        assert!((beta_at_epoch(&s, 100) - 0.2).abs() < 1e-15);
        assert!((beta_at_epoch(&s, 149) - 0.2).abs() < 1e-15);
        s.beta_max = 0.0;
        assert_eq!(beta_at_epoch(&s, 0), 0.0);
        assert_eq!(beta_at_epoch(&s, 120), 0.0);
    }

    #[test]
    fn beta_is_non_decreasing_and_capped() {
        let s = TrainSchedule::desk();
        let mut prev = 0.0;
        for e in 0..s.stage1_epochs {
            let b = beta_at_epoch(&s, e);
            assert!(b >= prev);
            assert!(b <= s.beta_max + 1e-15);
            prev = b;
        }
        assert!((prev - s.beta_max).abs() < 1e-15);
    }

    fn tiny_config(dir: &Path, data: &Path) -> RunConfig {
        let text = format!(
            "data = {}\nrun_dir = {}\nlatent_dim = 4\nhidden_dim = 8\n\
             stage1_epochs = 3\nstage2_epochs = 2\nstage3_epochs = 2\n\
             anneal_epochs = 2\nfix_epochs = 1\nbatch_size = 16\n\
             critic_cutoff = 5\nn_heldout_val = 10\nn_heldout_test = 10\nseed = 5\n",
            data.display(),
            dir.display()
        );
        RunConfig::from_str(&text).unwrap()
    }

    fn tiny_data() -> InteractionMatrix {
        synth::generate(80, 24, 3, 11).unwrap()
    }

    #[test]
    fn tiny_run_covers_all_stages() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("m.bin");
        let data = tiny_data();
        data.save(&data_path).unwrap();
        let cfg = tiny_config(dir.path(), &data_path);
        let mut t = Trainer::new(cfg, data).unwrap();
        t.run(|_| {}).unwrap();
        assert_eq!(t.log.records.len(), 7);
        let stages: Vec<u8> = t.log.records.iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![1, 1, 1, 2, 2, 3, 3]);
        let epochs: Vec<usize> = t.log.records.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, vec![1, 2, 3, 4, 5, 6, 7]);
        assert!(t.best.is_some());
    }

    #[test]
    fn identical_seeds_are_bit_identical_modulo_wall_time() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("m.bin");
        let data = tiny_data();
        data.save(&data_path).unwrap();
        let cfg = tiny_config(dir.path(), &data_path);
        let mut a = Trainer::new(cfg.clone(), tiny_data()).unwrap();
        a.run(|_| {}).unwrap();
        let mut b = Trainer::new(cfg, tiny_data()).unwrap();
        b.run(|_| {}).unwrap();
        assert_eq!(
            csv_without_wall(&a.log.to_csv()),
            csv_without_wall(&b.log.to_csv())
        );
        assert_eq!(a.actor.params.fingerprint(), b.actor.params.fingerprint());
        assert_eq!(
            a.critic.fingerprint_learnable(),
            b.critic.fingerprint_learnable()
        );
    }

    #[test]
    fn resume_mid_stage_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("m.bin");
        let data = tiny_data();
        data.save(&data_path).unwrap();
        let cfg = tiny_config(dir.path(), &data_path);

        let mut full = Trainer::new(cfg.clone(), tiny_data()).unwrap();
        full.run(|_| {}).unwrap();

        let mut first = Trainer::new(cfg, tiny_data()).unwrap();
        first.run_epochs(2).unwrap();
        let ckpt_path = dir.path().join("mid.ckpt");
        first.to_checkpoint().save(&ckpt_path).unwrap();

        let loaded = Checkpoint::load(&ckpt_path).unwrap();
        let mut resumed = Trainer::resume(&loaded, tiny_data()).unwrap();
        assert_eq!(resumed.global_epoch(), 2);
        resumed.run(|_| {}).unwrap();

        assert_eq!(
            csv_without_wall(&full.log.to_csv()),
            csv_without_wall(&resumed.log.to_csv())
        );
        assert_eq!(
            full.actor.params.fingerprint(),
            resumed.actor.params.fingerprint()
        );
        assert_eq!(
            full.critic.fingerprint_learnable(),
            resumed.critic.fingerprint_learnable()
        );
        // final checkpoints agree tensor for tensor
        let ca = full.to_checkpoint();
        let cb = resumed.to_checkpoint();
        assert_eq!(ca.kv.get("meta.global_epoch"), cb.kv.get("meta.global_epoch"));
        for (name, t) in &ca.tensors {
            let other = &cb.tensors[name];
            assert_eq!(t.shape(), other.shape(), "{name}");
            for (x, y) in t.data().iter().zip(other.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn stage2_freezes_actor_and_improves_critic() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("m.bin");
        let data = tiny_data();
        data.save(&data_path).unwrap();
        let cfg = tiny_config(dir.path(), &data_path);
        let mut t = Trainer::new(cfg, tiny_data()).unwrap();
        // through stage 1
        t.run_epochs(3).unwrap();
        let actor_fp = t.actor.params.fingerprint();
        let critic_fp = t.critic.fingerprint_learnable();
        t.run_epochs(2).unwrap();
        assert_eq!(t.actor.params.fingerprint(), actor_fp, "actor moved in stage 2");
        assert_ne!(
            t.critic.fingerprint_learnable(),
            critic_fp,
            "critic did not train"
        );
    }

    #[test]
    fn stage3_updates_both_models_in_lockstep() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("m.bin");
        let data = tiny_data();
        data.save(&data_path).unwrap();
        let cfg = tiny_config(dir.path(), &data_path);
        let mut t = Trainer::new(cfg, tiny_data()).unwrap();
        t.run_epochs(5).unwrap();
        let actor_fp = t.actor.params.fingerprint();
        let critic_fp = t.critic.fingerprint_learnable();
        t.run_epochs(1).unwrap();
        assert_ne!(t.actor.params.fingerprint(), actor_fp, "actor frozen in stage 3");
        assert_ne!(t.critic.fingerprint_learnable(), critic_fp, "critic frozen in stage 3");
        // one actor update and one critic update per batch
        assert_eq!(t.stage3_actor_steps, t.stage3_critic_steps);
        let n_batches = t.train.n_users().div_ceil(t.schedule.batch_size);
        assert_eq!(
            t.stage3_actor_steps + (t.skipped_half_steps / 2),
            n_batches as u64
        );
    }

    #[test]
    fn run_outputs_contract() {
        let dir = tempfile::tempdir().unwrap();
        let data_path = dir.path().join("m.bin");
        let data = tiny_data();
        data.save(&data_path).unwrap();
        let run_dir = dir.path().join("run");
        let mut cfg = tiny_config(dir.path(), &data_path);
        cfg.run_dir = run_dir.display().to_string();
        let mut t = Trainer::new(cfg, tiny_data()).unwrap();
        t.run(|_| {}).unwrap();
        t.write_run_outputs(&run_dir).unwrap();
        let mut names: Vec<String> = std::fs::read_dir(&run_dir)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        names.sort();
        assert_eq!(
            names,
            vec!["best.ckpt", "config.resolved", "final.ckpt", "metrics.csv"]
        );
    }
}
