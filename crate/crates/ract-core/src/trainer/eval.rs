//! Held-out evaluation: frozen fold-in inputs, deterministic prediction, and
//! per-user metric scores, fanned out across a worker pool and merged in
//! user order so results never depend on thread count.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::actor::Actor;
use crate::data::{densify_row, fold_in_split, InteractionMatrix};
use crate::error::{Error, Result};
use crate::nn::DenseMatrix;
use crate::ranking::{oracle_score, MetricSpec};
use crate::rng;

/// Fold-in settings for held-out users. The per-user split is derived from
/// `(seed, user index)` and therefore frozen across epochs.
#[derive(Debug, Clone, Copy)]
pub struct FoldInConfig {
    pub fraction: f64,
    pub seed: u64,
}

impl FoldInConfig {
    pub fn user_seed(&self, user: usize) -> u64 {
        rng::mix_seed(self.seed, rng::stream::EVAL_FOLD, user as u64, 0)
    }
}

/// Per-user evaluation scores, aligned with the requested metric list.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub user: usize,
    pub n_interactions: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Mean per metric over evaluable users.
    pub means: Vec<f64>,
    /// Users skipped for having fewer than two interactions.
    pub skipped: usize,
}

/// Worker pool capped by the `RACT_THREADS` environment variable
/// (default: logical cores).
pub fn worker_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("RACT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1);
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            builder = builder.num_threads(n);
        }
        builder.build().expect("worker pool")
    })
}

/// Evaluate `users` (indices into `data`): fold in the observed part of each
/// history, predict with the deterministic actor, exclude observed items and
/// score the held-out part with every metric in `metrics`.
pub fn evaluate(
    actor: &Actor,
    data: &InteractionMatrix,
    users: &[usize],
    fold: &FoldInConfig,
    metrics: &[MetricSpec],
    normalize_input: bool,
) -> Result<EvalReport> {
    let n_items = data.n_items();
    if n_items != actor.n_items() {
        return Err(Error::Training(format!(
            "item count mismatch: data has {n_items}, model has {}",
            actor.n_items()
        )));
    }
    let chunks: Vec<&[usize]> = users.chunks(256).collect();
    let per_chunk: Vec<Result<Vec<Option<EvalRow>>>> = worker_pool().install(|| {
        chunks
            .par_iter()
            .map(|chunk| evaluate_chunk(actor, data, chunk, fold, metrics, normalize_input))
            .collect()
    });

    let mut rows = Vec::new();
    let mut skipped = 0usize;
    for chunk in per_chunk {
        for row in chunk? {
            match row {
                Some(r) => rows.push(r),
                None => skipped += 1,
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::Training("no evaluable users".into()));
    }
    let mut means = vec![0.0; metrics.len()];
    for r in &rows {
        for (m, &s) in means.iter_mut().zip(&r.scores) {
            *m += s;
        }
    }
    for m in &mut means {
        *m /= rows.len() as f64;
    }
    Ok(EvalReport {
        rows,
        means,
        skipped,
    })
}

fn evaluate_chunk(
    actor: &Actor,
    data: &InteractionMatrix,
    users: &[usize],
    fold: &FoldInConfig,
    metrics: &[MetricSpec],
    normalize_input: bool,
) -> Result<Vec<Option<EvalRow>>> {
    let n_items = data.n_items();
    // fold in, collect evaluable users, batch one forward pass
    let mut folds = Vec::with_capacity(users.len());
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    for &u in users {
        let row = data.row(u);
        match fold_in_split(row, fold.fraction, fold.user_seed(u)) {
            Some(f) => {
                inputs.push(densify_row(&f.observed, n_items, normalize_input));
                folds.push(Some((u, row.len(), f)));
            }
            None => folds.push(None),
        }
    }
    if inputs.is_empty() {
        return Ok(vec![None; users.len()]);
    }
    let x_in = DenseMatrix::from_rows(&inputs);
    let pred = actor.predict(&x_in)?;

    let mut out = Vec::with_capacity(users.len());
    let mut pi = 0usize;
    for f in folds {
        match f {
            Some((u, n_inter, fold_row)) => {
                let scores_row = pred.row(pi);
                pi += 1;
                let mut scores = Vec::with_capacity(metrics.len());
                for spec in metrics {
                    scores.push(oracle_score(
                        scores_row,
                        data.row(u),
                        &fold_row.observed,
                        *spec,
                    )?);
                }
                out.push(Some(EvalRow {
                    user: u,
                    n_interactions: n_inter,
                    scores,
                }));
            }
            None => out.push(None),
        }
    }
    Ok(out)
}

/// One activity bucket of the per-user score breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityBucket {
    pub label: String,
    pub count: usize,
    pub mean: f64,
}

/// Bucket per-user scores by interaction count. With edges `[a, b, c]` the
/// buckets are `< a`, `a..=b`, `b+1..=c`, `> c`; empty buckets are omitted.
pub fn activity_breakdown(
    rows: &[EvalRow],
    metric_index: usize,
    edges: &[usize],
) -> Vec<ActivityBucket> {
    let mut labels = Vec::with_capacity(edges.len() + 1);
    if edges.is_empty() {
        labels.push("all".to_string());
    } else {
        labels.push(format!("<{}", edges[0]));
        for w in edges.windows(2) {
            labels.push(format!("{}-{}", w[0], w[1]));
        }
        labels.push(format!(">{}", edges[edges.len() - 1]));
    }
    let mut sums = vec![0.0; labels.len()];
    let mut counts = vec![0usize; labels.len()];
    for r in rows {
        let mut bucket = 0;
        for (i, &e) in edges.iter().enumerate() {
            if r.n_interactions < e || (i > 0 && r.n_interactions == e) {
                break;
            }
            bucket = i + 1;
        }
        // edges [a,b,c]: bucket 1 covers a..=b, bucket 2 covers b+1..=c
        sums[bucket] += r.scores[metric_index];
        counts[bucket] += 1;
    }
    labels
        .into_iter()
        .zip(sums.iter().zip(&counts))
        .filter(|(_, (_, &c))| c > 0)
        .map(|(label, (&s, &c))| ActivityBucket {
            label,
            count: c,
            mean: s / c as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor::{Actor, ActorConfig};
    use crate::ranking::brute_force_reference;

    fn row(n: usize, score: f64) -> EvalRow {
        EvalRow {
            user: 0,
            n_interactions: n,
            scores: vec![score],
        }
    }

    fn toy_matrix() -> InteractionMatrix {
        // 8 items so the brute-force reference applies
        crate::synth::generate(40, 8, 2, 13).unwrap()
    }

    #[test]
    fn evaluate_means_stay_in_unit_interval() {
        let data = toy_matrix();
        let users: Vec<usize> = (0..data.n_users()).collect();
        let actor = Actor::new(ActorConfig::vae(3, 6), 8, 1).unwrap();
        let fold = FoldInConfig {
            fraction: 0.4,
            seed: 5,
        };
        let metrics = [MetricSpec::ndcg(3), MetricSpec::recall(3)];
        let report = evaluate(&actor, &data, &users, &fold, &metrics, true).unwrap();
        for &m in &report.means {
            assert!((0.0..=1.0).contains(&m));
        }
        assert_eq!(report.rows.len() + report.skipped, users.len());
    }

    #[test]
    fn evaluate_matches_brute_force_reference_per_user() {
        let data = toy_matrix();
        let users: Vec<usize> = (0..data.n_users()).collect();
        let actor = Actor::new(ActorConfig::vae(3, 6), 8, 2).unwrap();
        let fold = FoldInConfig {
            fraction: 0.4,
            seed: 7,
        };
        let spec = MetricSpec::ndcg(4);
        let report = evaluate(&actor, &data, &users, &fold, &[spec], true).unwrap();
        for r in &report.rows {
            let full_row = data.row(r.user);
            let f = fold_in_split(full_row, fold.fraction, fold.user_seed(r.user)).unwrap();
            let x_in = DenseMatrix::from_rows(&[densify_row(&f.observed, 8, true)]);
            let pred = actor.predict(&x_in).unwrap();
            let reference =
                brute_force_reference(pred.row(0), full_row, &f.observed, spec).unwrap();
            assert!(
                (r.scores[0] - reference).abs() <= 1e-12,
                "user {}: {} vs {}",
                r.user,
                r.scores[0],
                reference
            );
        }
    }

    #[test]
    fn ground_truth_scores_reach_perfect_mean() {
        // the oracle upper bound: scoring with the user's own interaction
        // vector ranks every held-out item on top
        let data = toy_matrix();
        let spec = MetricSpec::ndcg(4);
        let mut scores = Vec::new();
        for u in 0..data.n_users() {
            let row = data.row(u);
            let Some(f) = fold_in_split(row, 0.4, 100 + u as u64) else {
                continue;
            };
            let truth = densify_row(row, 8, false);
            scores.push(oracle_score(&truth, row, &f.observed, spec).unwrap());
        }
        assert!(!scores.is_empty());
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        assert_eq!(mean, 1.0);
    }

    #[test]
    fn evaluate_with_no_evaluable_users_is_error() {
        let data = InteractionMatrix::from_rows(
            vec![vec![0], vec![1]],
            3,
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let users = vec![0usize, 1];
        let actor = Actor::new(ActorConfig::vae(2, 4), 3, 1).unwrap();
        let fold = FoldInConfig {
            fraction: 0.5,
            seed: 1,
        };
        assert!(evaluate(&actor, &data, &users, &fold, &[MetricSpec::ndcg(2)], true).is_err());
    }

    #[test]
    fn all_users_in_one_bucket_equals_global_mean() {
        let rows = vec![row(10, 0.2), row(12, 0.4), row(15, 0.6)];
        let buckets = activity_breakdown(&rows, 0, &[250, 500, 750]);
        assert_eq!(buckets.len(), 1);
        assert_eq!(buckets[0].label, "<250");
        assert_eq!(buckets[0].count, 3);
        assert!((buckets[0].mean - 0.4).abs() < 1e-12);
    }

    #[test]
    fn two_buckets_hand_means() {
        let rows = vec![row(100, 0.2), row(300, 0.6), row(400, 0.8)];
        let buckets = activity_breakdown(&rows, 0, &[250, 500, 750]);
        assert_eq!(buckets.len(), 2);
        assert!((buckets[0].mean - 0.2).abs() < 1e-12);
        assert!((buckets[1].mean - 0.7).abs() < 1e-12);
        assert_eq!(buckets[1].label, "250-500");
    }

    #[test]
    fn bucket_populations_sum_to_row_count() {
        let rows: Vec<EvalRow> = (0..50).map(|i| row(i * 40, 0.5)).collect();
        let buckets = activity_breakdown(&rows, 0, &[250, 500, 750]);
        let total: usize = buckets.iter().map(|b| b.count).sum();
        assert_eq!(total, 50);
    }

    #[test]
    fn boundary_counts_follow_bucket_edges() {
        // 250 and 500 belong to the middle bucket, 501 to the next
        let rows = vec![row(249, 0.1), row(250, 0.2), row(500, 0.3), row(501, 0.4)];
        let buckets = activity_breakdown(&rows, 0, &[250, 500, 750]);
        assert_eq!(buckets[0].count, 1);
        assert_eq!(buckets[1].count, 2);
        assert_eq!(buckets[2].count, 1);
    }
}
