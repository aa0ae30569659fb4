//! Cluster-structured synthetic implicit feedback: a desk-scale benchmark
//! with planted, learnable preference structure.

use rand::Rng;

use crate::data::InteractionMatrix;
use crate::error::{Error, Result};
use crate::rng;

/// Probability of interacting with an item from the user's own cluster.
pub const P_IN: f64 = 0.3;
/// Probability of interacting with any other item.
pub const P_OUT: f64 = 0.01;

/// Generate a synthetic interaction matrix: each user belongs to one latent
/// cluster of items and interacts with in-cluster items at [`P_IN`] and
/// out-of-cluster items at [`P_OUT`]. Items are partitioned into contiguous
/// clusters of near-equal size.
pub fn generate(
    n_users: usize,
    n_items: usize,
    n_clusters: usize,
    seed: u64,
) -> Result<InteractionMatrix> {
    if n_users == 0 || n_items == 0 || n_clusters == 0 {
        return Err(Error::InvalidConfig("synthetic sizes must be positive".into()));
    }
    if n_clusters > n_items {
        return Err(Error::InvalidConfig(format!(
            "{n_clusters} clusters cannot partition {n_items} items"
        )));
    }
    let mut gen = rng::rng_from(seed, rng::stream::INIT, 2, 0);
    let mut rows = Vec::with_capacity(n_users);
    for _ in 0..n_users {
        let cluster = gen.gen_range(0..n_clusters);
        let mut row = Vec::new();
        for item in 0..n_items {
            let p = if item_cluster(item, n_items, n_clusters) == cluster {
                P_IN
            } else {
                P_OUT
            };
            if gen.gen::<f64>() < p {
                row.push(item as u32);
            }
        }
        rows.push(row);
    }
    let vocab = (0..n_items).map(|i| format!("i{i}")).collect();
    InteractionMatrix::from_rows(rows, n_items, vocab)
}

/// Cluster owning `item` under the contiguous partition.
pub fn item_cluster(item: usize, n_items: usize, n_clusters: usize) -> usize {
    (item * n_clusters / n_items).min(n_clusters - 1)
}
