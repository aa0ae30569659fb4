//! Per-user loss terms for the prediction policies: multinomial and Gaussian
//! negative log-likelihoods, the Gaussian KL regularizer, and the BPR / WARP
//! pairwise ranking losses with their score gradients.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::nn::sigmoid;

/// `-sum_m x_m ln(pi_m)` over the full item vector.
pub fn nll_multinomial(x: &[f64], pi: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), pi.len());
    let mut nll = 0.0;
    for (&xm, &pm) in x.iter().zip(pi) {
        if xm != 0.0 {
            nll -= xm * pm.ln();
        }
    }
    nll
}

/// `0.5 * sum_m (x_m - s_m)^2` with unit variance and constants dropped;
/// gradient with respect to the scores is `s - x`.
pub fn nll_gaussian(x: &[f64], scores: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), scores.len());
    x.iter()
        .zip(scores)
        .map(|(&xm, &sm)| {
            let d = xm - sm;
            0.5 * d * d
        })
        .sum()
}

/// `KL(N(mu, diag(exp(log_var))) || N(0, I))
///  = 0.5 * sum_k (exp(log_var_k) + mu_k^2 - 1 - log_var_k)`; always >= 0.
pub fn kl_gaussian(mu: &[f64], log_var: &[f64]) -> f64 {
    debug_assert_eq!(mu.len(), log_var.len());
    mu.iter()
        .zip(log_var)
        .map(|(&m, &lv)| 0.5 * (lv.exp() + m * m - 1.0 - lv))
        .sum()
}

/// Cumulative weight for a positive at rank `r` (1-based): `sum_{k=1..r} 1/k`.
pub fn warp_weight(rank: usize) -> f64 {
    (1..=rank).map(|k| 1.0 / k as f64).sum()
}

/// Pairwise BPR loss `sum_{i in K+} sum_{j in K-} sigmoid(s_j - s_i)` with its
/// gradient over scores. An empty positive or negative set contributes zero.
pub fn bpr_loss(scores: &[f64], positives: &[u32]) -> (f64, Vec<f64>) {
    let m = scores.len();
    let mut grad = vec![0.0; m];
    let is_pos = positive_mask(m, positives);
    let mut loss = 0.0;
    for &i in positives {
        let si = scores[i as usize];
        for (j, &sj) in scores.iter().enumerate() {
            if is_pos[j] {
                continue;
            }
            let s = sigmoid(sj - si);
            loss += s;
            let d = s * (1.0 - s);
            grad[j] += d;
            grad[i as usize] -= d;
        }
    }
    (loss, grad)
}

/// Exact WARP loss
/// `sum_{i in K+} w(r_i) sum_{j in K-} max(0, 1 + s_j - s_i)`
/// where `r_i` is the 1-based rank of positive `i` among all items by score
/// (ties broken by ascending index). The rank weight is treated as constant
/// in the gradient.
pub fn warp_loss_exact(scores: &[f64], positives: &[u32]) -> (f64, Vec<f64>) {
    let m = scores.len();
    let mut grad = vec![0.0; m];
    let is_pos = positive_mask(m, positives);
    let mut loss = 0.0;
    for &i in positives {
        let si = scores[i as usize];
        let rank = rank_of(scores, i);
        let w = warp_weight(rank);
        for (j, &sj) in scores.iter().enumerate() {
            if is_pos[j] {
                continue;
            }
            let viol = 1.0 + sj - si;
            if viol > 0.0 {
                loss += w * viol;
                grad[j] += w;
                grad[i as usize] -= w;
            }
        }
    }
    (loss, grad)
}

/// Sampled WARP estimator: for each positive, draw negatives uniformly with
/// replacement until a margin violation or a cap of `ceil(M / |K+|)` trials.
/// The trial count estimates the violating rank as `floor((M-1)/t)` and the
/// single observed violation is scaled by `|K-| / t` (the implied violator
/// count), so the estimate tracks the exact double sum in expectation.
pub fn warp_loss_sampled(
    scores: &[f64],
    positives: &[u32],
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>) {
    let m = scores.len();
    let mut grad = vec![0.0; m];
    if positives.is_empty() || positives.len() == m {
        return (0.0, grad);
    }
    let is_pos = positive_mask(m, positives);
    let negatives: Vec<usize> = (0..m).filter(|&j| !is_pos[j]).collect();
    let cap = m.div_ceil(positives.len());
    let mut loss = 0.0;
    for &i in positives {
        let si = scores[i as usize];
        for t in 1..=cap {
            let j = negatives[rng.gen_range(0..negatives.len())];
            let viol = 1.0 + scores[j] - si;
            if viol > 0.0 {
                let rank_est = ((m - 1) / t).max(1);
                let scale = warp_weight(rank_est) * negatives.len() as f64 / t as f64;
                loss += scale * viol;
                grad[j] += scale;
                grad[i as usize] -= scale;
                break;
            }
        }
    }
    (loss, grad)
}

fn positive_mask(m: usize, positives: &[u32]) -> Vec<bool> {
    let mut mask = vec![false; m];
    for &i in positives {
        mask[i as usize] = true;
    }
    mask
}

/// 1-based rank of `item` among all items by descending score, ascending
/// index on ties.
fn rank_of(scores: &[f64], item: u32) -> usize {
    let si = scores[item as usize];
    let mut rank = 1;
    for (j, &sj) in scores.iter().enumerate() {
        if j as u32 == item {
            continue;
        }
        if sj > si || (sj == si && (j as u32) < item) {
            rank += 1;
        }
    }
    rank
}
