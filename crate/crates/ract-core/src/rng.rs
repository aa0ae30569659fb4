//! Seed derivation. All randomness in the engine flows through ChaCha
//! generators seeded by mixing a root seed with structural labels, so any
//! point in a run can be reproduced from `(seed, stage, epoch)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates nearby inputs.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Mix a root seed with up to three structural labels into a derived seed.
pub fn mix_seed(root: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut s = splitmix64(root ^ 0xA076_1D64_78BD_642F);
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ b);
    s = splitmix64(s ^ c);
    s
}

pub fn rng_from(root: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(root, a, b, c))
}

/// Standard normal draw via Box-Muller.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Stream labels used when deriving per-epoch generators.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const MASK: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const EVAL_FOLD: u64 = 5;
    pub const LOSS: u64 = 6;
}
