//! Seeded random streams.
//!
//! Every stochastic routine takes a `&mut RandomStream`. Independent streams
//! are derived from a root seed and a stream index, so results do not depend
//! on the order in which replicates or iterations are executed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

pub type RandomStream = ChaCha20Rng;

pub fn stream(seed: u64) -> RandomStream {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Stream `index` of the family rooted at `seed`.
pub fn substream(seed: u64, index: u64) -> RandomStream {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Split a child stream off a parent; advances the parent by one draw.
pub fn split(parent: &mut RandomStream) -> RandomStream {
    ChaCha20Rng::seed_from_u64(parent.random::<u64>())
}

pub fn standard_normal(rng: &mut RandomStream) -> f64 {
    rng.sample(StandardNormal)
}

pub fn normal_vec(rng: &mut RandomStream, d: usize) -> Vec<f64> {
    (0..d).map(|_| standard_normal(rng)).collect()
}

/// `n` standard Gaussian draws in `R^d`, sample-major.
pub fn normal_batch(rng: &mut RandomStream, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| normal_vec(rng, d)).collect()
}
