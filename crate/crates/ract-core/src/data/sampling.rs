//! User splits, fold-in partitions, Bernoulli masks and batch iteration.
//! Everything here is reproducible from its seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Strong-generalization split sizes.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub n_heldout_val: usize,
    pub n_heldout_test: usize,
    pub seed: u64,
}

/// Result of [`split_users`]: training matrix over training users only, plus
/// validation and test user indices into the original matrix.
#[derive(Debug, Clone)]
pub struct UserSplit {
    pub train: InteractionMatrix,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Partition users into train/validation/test by a seeded shuffle. The train
/// matrix keeps the full histories of training users and the original item
/// indexing.
pub fn split_users(matrix: &InteractionMatrix, spec: &SplitSpec) -> Result<UserSplit> {
    let n = matrix.n_users();
    if spec.n_heldout_val + spec.n_heldout_test >= n {
        return Err(Error::Data(format!(
            "cannot hold out {}+{} of {n} users",
            spec.n_heldout_val, spec.n_heldout_test
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_from(spec.seed, rng::stream::SHUFFLE, 0, 0);
    shuffle(&mut order, &mut rng);

    let val: Vec<usize> = order[..spec.n_heldout_val].to_vec();
    let test: Vec<usize> = order[spec.n_heldout_val..spec.n_heldout_val + spec.n_heldout_test].to_vec();
    let mut train_users: Vec<usize> = order[spec.n_heldout_val + spec.n_heldout_test..].to_vec();
    train_users.sort_unstable();

    let rows: Vec<Vec<u32>> = train_users.iter().map(|&u| matrix.row(u).to_vec()).collect();
    let train = InteractionMatrix::from_rows(rows, matrix.n_items(), matrix.item_vocab().to_vec())?;
    Ok(UserSplit { train, val, test })
}

/// Fisher-Yates with the crate's seeded generator.
pub(crate) fn shuffle<T>(xs: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// A held-out user's history partitioned into the part fed to the model and
/// the part scored against it. Both lists sorted, disjoint, union = full row.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldInRow {
    pub observed: Vec<u32>,
    pub heldout: Vec<u32>,
}

/// Hold out `round(holdout_fraction * |row|)` items uniformly at random,
/// clamped so at least one item lands on each side. Users with fewer than two
/// interactions are un-evaluable and return `None`.
pub fn fold_in_split(row: &[u32], holdout_fraction: f64, seed: u64) -> Option<FoldInRow> {
    assert!(
        holdout_fraction > 0.0 && holdout_fraction < 1.0,
        "holdout fraction must be in (0, 1)"
    );
    let n = row.len();
    if n < 2 {
        return None;
    }
    let k = ((holdout_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = rng::rng_from(seed, rng::stream::EVAL_FOLD, 0, 0);
    shuffle(&mut idx, &mut rng);
    let mut heldout: Vec<u32> = idx[..k].iter().map(|&i| row[i]).collect();
    let mut observed: Vec<u32> = idx[k..].iter().map(|&i| row[i]).collect();
    heldout.sort_unstable();
    observed.sort_unstable();
    Some(FoldInRow { observed, heldout })
}

/// Training-time Bernoulli mask: keep probability for each interaction.
#[derive(Debug, Clone, Copy)]
pub struct MaskConfig {
    pub alpha: f64,
}

impl MaskConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "mask alpha must be in (0, 1], got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }
}

/// A masked training row: `observed` is the model input support, `heldout`
/// is its complement within the user's interactions.
#[derive(Debug, Clone)]
pub struct MaskedRow {
    pub observed: Vec<u32>,
    pub heldout: Vec<u32>,
}

/// Keep each interaction independently with probability `alpha`; the dropped
/// complement doubles as the per-iteration held-out set.
pub fn sample_mask(indices: &[u32], cfg: &MaskConfig, rng: &mut ChaCha8Rng) -> MaskedRow {
    let mut observed = Vec::with_capacity(indices.len());
    let mut heldout = Vec::new();
    for &i in indices {
        if rng.gen::<f64>() < cfg.alpha {
            observed.push(i);
        } else {
            heldout.push(i);
        }
    }
    MaskedRow { observed, heldout }
}

/// Seeded shuffle of `users` chunked into batches; every user appears exactly
/// once per epoch and the last batch may be short.
pub fn batch_iter(users: &[usize], batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be >= 1");
    let mut order: Vec<usize> = users.to_vec();
    let mut rng = rng::rng_from(epoch_seed, rng::stream::SHUFFLE, 1, 0);
    shuffle(&mut order, &mut rng);
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// Expand a sparse row into a dense 0/1 vector; optionally scale to unit
/// Euclidean norm (a zero row stays zero).
pub fn densify_row(indices: &[u32], n_items: usize, normalize: bool) -> Vec<f64> {
    let mut out = vec![0.0; n_items];
    for &i in indices {
        debug_assert!((i as usize) < n_items);
        out[i as usize] = 1.0;
    }
    if normalize && !indices.is_empty() {
        let norm = (indices.len() as f64).sqrt();
        for &i in indices {
            out[i as usize] = 1.0 / norm;
        }
    }
    out
}
