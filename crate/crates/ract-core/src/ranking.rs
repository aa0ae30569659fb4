//! Exact ranking metrics: DCG@R, NDCG@R and Recall@R over a deterministic
//! ranking, plus a brute-force reference implementation used as a testing
//! oracle. These are the non-differentiable ground-truth scorers the critic
//! learns to approximate.

use crate::error::{Error, Result};

/// Which metric to compute, and its cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub cutoff: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Ndcg,
    Recall,
}

impl MetricSpec {
    pub fn ndcg(cutoff: usize) -> Self {
        Self {
            kind: MetricKind::Ndcg,
            cutoff,
        }
    }

    pub fn recall(cutoff: usize) -> Self {
        Self {
            kind: MetricKind::Recall,
            cutoff,
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            MetricKind::Ndcg => format!("ndcg@{}", self.cutoff),
            MetricKind::Recall => format!("recall@{}", self.cutoff),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ndcg" => Ok(MetricKind::Ndcg),
            "recall" => Ok(MetricKind::Recall),
            other => Err(Error::InvalidConfig(format!("unknown metric kind `{other}`"))),
        }
    }
}

/// Candidate items ordered best-first. Ties are broken by ascending item
/// index; excluded items never appear.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub ordering: Vec<u32>,
}

/// Sort items by descending score, excluding `exclude` (a sorted index list).
/// Equal scores order by ascending item index, so the result is deterministic.
pub fn rank_items(scores: &[f64], exclude: &[u32]) -> Result<RankedList> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Ranking("non-finite score".into()));
    }
    debug_assert!(exclude.windows(2).all(|w| w[0] < w[1]), "exclude must be sorted");
    let mut ordering: Vec<u32> = Vec::with_capacity(scores.len() - exclude.len());
    for idx in 0..scores.len() as u32 {
        if exclude.binary_search(&idx).is_err() {
            ordering.push(idx);
        }
    }
    if ordering.is_empty() {
        return Err(Error::Ranking("all items excluded from ranking".into()));
    }
    ordering.sort_unstable_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    Ok(RankedList { ordering })
}

#[inline]
fn is_hit(heldout: &[u32], item: u32) -> bool {
    heldout.binary_search(&item).is_ok()
}

/// `sum_{r=1..min(R, len)} hit(r) / log2(r + 1)`. For binary relevance the
/// gain `2^hit - 1` reduces to the indicator; the brute-force reference keeps
/// the literal form.
pub fn dcg_at_r(ranking: &RankedList, heldout: &[u32], r: usize) -> f64 {
    assert!(r >= 1, "cutoff must be >= 1");
    let mut dcg = 0.0;
    for (pos, &item) in ranking.ordering.iter().take(r).enumerate() {
        if is_hit(heldout, item) {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    dcg
}

fn ideal_dcg(n_hits: usize, r: usize) -> f64 {
    (0..n_hits.min(r)).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum()
}

/// DCG@R divided by its best possible value, in [0, 1].
pub fn ndcg_at_r(ranking: &RankedList, heldout: &[u32], r: usize) -> Result<f64> {
    if heldout.is_empty() {
        return Err(Error::Ranking("empty held-out set".into()));
    }
    let dcg = dcg_at_r(ranking, heldout, r);
    Ok(dcg / ideal_dcg(heldout.len(), r))
}

/// `(#hits in top R) / min(R, |heldout|)`, in [0, 1].
pub fn recall_at_r(ranking: &RankedList, heldout: &[u32], r: usize) -> Result<f64> {
    assert!(r >= 1, "cutoff must be >= 1");
    if heldout.is_empty() {
        return Err(Error::Ranking("empty held-out set".into()));
    }
    let hits = ranking
        .ordering
        .iter()
        .take(r)
        .filter(|&&item| is_hit(heldout, item))
        .count();
    Ok(hits as f64 / r.min(heldout.len()) as f64)
}

/// Score a prediction against the held-out part of a user's history:
/// rank all items except the observed ones, then apply the metric to the
/// held-out set `target \ observed`. Both index lists must be sorted.
pub fn oracle_score(
    prediction: &[f64],
    target: &[u32],
    observed: &[u32],
    spec: MetricSpec,
) -> Result<f64> {
    let heldout = sorted_difference(target, observed);
    if heldout.is_empty() {
        return Err(Error::Ranking("empty held-out set".into()));
    }
    let ranking = rank_items(prediction, observed)?;
    match spec.kind {
        MetricKind::Ndcg => ndcg_at_r(&ranking, &heldout, spec.cutoff),
        MetricKind::Recall => recall_at_r(&ranking, &heldout, spec.cutoff),
    }
}

/// Elements of `a` not present in `b`; both inputs sorted ascending.
pub fn sorted_difference(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut out = Vec::with_capacity(a.len());
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j >= b.len() || b[j] != x {
            out.push(x);
        }
    }
    out
}

/// Maximum item count accepted by [`brute_force_reference`].
pub const BRUTE_FORCE_MAX_ITEMS: usize = 12;

/// Independent reference scorer for small instances. Ranks every candidate by
/// exhaustive comparison counting (no sort call) and evaluates the metric
/// formulas literally, including the `2^rel - 1` gain.
pub fn brute_force_reference(
    prediction: &[f64],
    target: &[u32],
    observed: &[u32],
    spec: MetricSpec,
) -> Result<f64> {
    let m = prediction.len();
    if m > BRUTE_FORCE_MAX_ITEMS {
        return Err(Error::Ranking(format!(
            "brute-force reference supports at most {BRUTE_FORCE_MAX_ITEMS} items, got {m}"
        )));
    }
    let heldout = sorted_difference(target, observed);
    if heldout.is_empty() {
        return Err(Error::Ranking("empty held-out set".into()));
    }
    let candidates: Vec<u32> =
        (0..m as u32).filter(|i| observed.binary_search(i).is_err()).collect();
    if candidates.is_empty() {
        return Err(Error::Ranking("all items excluded from ranking".into()));
    }

    // position of each candidate = 1 + number of candidates strictly ahead of it
    let mut by_position = vec![u32::MAX; candidates.len()];
    for &c in &candidates {
        let mut pos = 0usize;
        for &d in &candidates {
            if d == c {
                continue;
            }
            let sc = prediction[c as usize];
            let sd = prediction[d as usize];
            if sd > sc || (sd == sc && d < c) {
                pos += 1;
            }
        }
        by_position[pos] = c;
    }

    let relevance = |item: u32| -> f64 {
        if heldout.binary_search(&item).is_ok() {
            1.0
        } else {
            0.0
        }
    };

    match spec.kind {
        MetricKind::Ndcg => {
            let mut dcg = 0.0;
            for (pos, &item) in by_position.iter().enumerate().take(spec.cutoff) {
                dcg += (2.0f64.powf(relevance(item)) - 1.0) / ((pos + 2) as f64).log2();
            }
            let mut idcg = 0.0;
            for pos in 0..spec.cutoff.min(heldout.len()) {
                idcg += (2.0f64.powf(1.0) - 1.0) / ((pos + 2) as f64).log2();
            }
            Ok(dcg / idcg)
        }
        MetricKind::Recall => {
            let mut hits = 0.0;
            for &item in by_position.iter().take(spec.cutoff) {
                hits += relevance(item);
            }
            Ok(hits / spec.cutoff.min(heldout.len()) as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_items_descending() {
        let r = rank_items(&[0.1, 0.9, 0.5], &[]).unwrap();
        assert_eq!(r.ordering, vec![1, 2, 0]);
    }

    #[test]
    fn rank_items_ties_break_by_index() {
        let r = rank_items(&[0.5, 0.5], &[]).unwrap();
        assert_eq!(r.ordering, vec![0, 1]);
    }

    #[test]
    fn rank_items_exclusion() {
        let r = rank_items(&[0.9, 0.8, 0.7], &[0]).unwrap();
        assert_eq!(r.ordering, vec![1, 2]);
    }

    #[test]
    fn rank_items_all_excluded_is_error() {
        assert!(rank_items(&[0.5, 0.5], &[0, 1]).is_err());
    }

    #[test]
    fn dcg_values() {
        let ranking = RankedList {
            ordering: vec![3, 7, 4, 9],
        };
        assert_eq!(dcg_at_r(&ranking, &[1, 2], 4), 0.0);
        // hits at ranks 1 and 3: 1/log2(2) + 1/log2(4) = 1.5
        let d = dcg_at_r(&ranking, &[3, 4], 4);
        assert!((d - 1.5).abs() < 1e-12);
        let d = dcg_at_r(&ranking, &[3], 1);
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_perfect_ranking_is_one() {
        let ranking = RankedList {
            ordering: vec![2, 5, 0, 1],
        };
        let v = ndcg_at_r(&ranking, &[2, 5], 4).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_on_coherent_and_misranked_predictions() {
        // target supported on items {0, 1}; prediction A ranks both on top,
        // prediction B lets a non-target item slip between them
        let target = vec![0u32, 1];
        let a = [0.8, 0.1, 0.06, 0.04];
        let b = [0.4, 0.25, 0.30, 0.05];
        let ra = rank_items(&a, &[]).unwrap();
        let rb = rank_items(&b, &[]).unwrap();
        let na = ndcg_at_r(&ra, &target, 4).unwrap();
        let nb = ndcg_at_r(&rb, &target, 4).unwrap();
        assert!((na - 1.0).abs() < 1e-12);
        let expect_b = (1.0 + 1.0 / 4.0f64.log2()) / (1.0 + 1.0 / 3.0f64.log2());
        assert!((nb - expect_b).abs() < 1e-12);
        assert!((nb - 0.9197207891481876).abs() < 1e-9);
        assert!(na > nb);
    }

    #[test]
    fn ndcg_all_candidates_heldout_is_one() {
        let ranking = RankedList {
            ordering: vec![1, 0, 2],
        };
        let v = ndcg_at_r(&ranking, &[0, 1, 2], 5).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ndcg_empty_heldout_is_error() {
        let ranking = RankedList { ordering: vec![0] };
        assert!(ndcg_at_r(&ranking, &[], 1).is_err());
    }

    #[test]
    fn recall_values() {
        let ranking = RankedList {
            ordering: vec![0, 1, 2, 3, 4, 5],
        };
        // all heldout in top R
        assert_eq!(recall_at_r(&ranking, &[0, 1], 3).unwrap(), 1.0);
        // |H0| = 10 capped instance: 3 hits in top 5 over min(5, 10)
        let heldout: Vec<u32> = vec![0, 2, 4, 10, 11, 12, 13, 14, 15, 16];
        let v = recall_at_r(&ranking, &heldout, 5).unwrap();
        assert!((v - 0.6).abs() < 1e-12);
        // small held-out set normalization: min(100, 2)
        let v = recall_at_r(&ranking, &[4, 5], 100).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_score_perfect_prediction() {
        // scores proportional to the target on the unobserved support
        let target = vec![1u32, 3];
        let observed = vec![];
        let pred = [0.0, 1.0, 0.0, 1.0];
        for spec in [MetricSpec::ndcg(2), MetricSpec::recall(2)] {
            let v = oracle_score(&pred, &target, &observed, spec).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_score_uniform_scores_tiebreak_value() {
        // uniform prediction over 6 items, heldout = {2, 5}: ranking is by
        // index, hits land at positions 3 and 6 (frozen via the brute-force
        // reference)
        let pred = [0.25; 6];
        let target = vec![2u32, 5];
        let v = oracle_score(&pred, &target, &[], MetricSpec::ndcg(6)).unwrap();
        let reference = brute_force_reference(&pred, &target, &[], MetricSpec::ndcg(6)).unwrap();
        assert!((v - reference).abs() < 1e-12);
        let expect = (1.0 / 4.0f64.log2() + 1.0 / 7.0f64.log2()) / (1.0 + 1.0 / 3.0f64.log2());
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn brute_force_single_item() {
        assert!((brute_force_reference(&[0.3], &[0], &[], MetricSpec::ndcg(1)).unwrap() - 1.0).abs() < 1e-12);
        assert!(brute_force_reference(&[0.3], &[], &[], MetricSpec::ndcg(1)).is_err());
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let pred = vec![0.0; 13];
        assert!(brute_force_reference(&pred, &[0], &[], MetricSpec::ndcg(1)).is_err());
    }

    #[test]
    fn log_base_invariance_of_ndcg() {
        // recompute with natural log; the base cancels in the ratio
        let scores = [0.3, 0.9, 0.1, 0.5, 0.45];
        let heldout = vec![0u32, 3];
        let ranking = rank_items(&scores, &[]).unwrap();
        let v2 = ndcg_at_r(&ranking, &heldout, 4).unwrap();
        let dcg_ln: f64 = ranking
            .ordering
            .iter()
            .take(4)
            .enumerate()
            .filter(|(_, &it)| heldout.binary_search(&it).is_ok())
            .map(|(pos, _)| 1.0 / ((pos + 2) as f64).ln())
            .sum();
        let idcg_ln: f64 = (0..heldout.len().min(4)).map(|p| 1.0 / ((p + 2) as f64).ln()).sum();
        assert!((v2 - dcg_ln / idcg_ln).abs() < 1e-12);
    }

    #[test]
    fn swapping_hit_upward_never_decreases_dcg() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let m = rng.gen_range(3..9usize);
            let mut order: Vec<u32> = (0..m as u32).collect();
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let n_hold = rng.gen_range(1..m);
            let mut heldout: Vec<u32> = (0..m as u32).collect();
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                heldout.swap(i, j);
            }
            heldout.truncate(n_hold);
            heldout.sort_unstable();
            let r = rng.gen_range(1..=m);
            // find a (miss, hit) adjacent pair and swap the hit upward
            let ranking = RankedList { ordering: order.clone() };
            let before = dcg_at_r(&ranking, &heldout, r);
            for pos in 0..m - 1 {
                let up_is_miss = heldout.binary_search(&order[pos]).is_err();
                let down_is_hit = heldout.binary_search(&order[pos + 1]).is_ok();
                if up_is_miss && down_is_hit {
                    let mut swapped = order.clone();
                    swapped.swap(pos, pos + 1);
                    let after = dcg_at_r(&RankedList { ordering: swapped }, &heldout, r);
                    assert!(after >= before - 1e-15);
                    break;
                }
            }
        }
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval(
            scores in proptest::collection::vec(-10.0..10.0f64, 2..10),
            seed in 0u64..1000,
        ) {
            let m = scores.len();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_hold = rng.gen_range(1..=m);
            let mut items: Vec<u32> = (0..m as u32).collect();
            for i in (1..m).rev() {
                let j = rng.gen_range(0..=i);
                items.swap(i, j);
            }
            let mut heldout = items[..n_hold].to_vec();
            heldout.sort_unstable();
            let r = rng.gen_range(1..=2 * m);
            let ranking = rank_items(&scores, &[]).unwrap();
            let ndcg = ndcg_at_r(&ranking, &heldout, r).unwrap();
            let recall = recall_at_r(&ranking, &heldout, r).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&ndcg));
            prop_assert!((0.0..=1.0 + 1e-12).contains(&recall));
        }

        #[test]
        fn oracle_score_is_scale_invariant(
            scores in proptest::collection::vec(0.01..10.0f64, 3..9),
            c in 0.001..100.0f64,
        ) {
            let target = vec![0u32, 2];
            let spec = MetricSpec::ndcg(3);
            let base = oracle_score(&scores, &target, &[], spec).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            let v = oracle_score(&scaled, &target, &[], spec).unwrap();
            prop_assert!((base - v).abs() < 1e-12);
        }
    }
}
