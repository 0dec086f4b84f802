//! Seeded key generators.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Result, TreeError};

/// `n` distinct keys drawn uniformly from `[1, 2^63)`, in draw order.
pub fn uniform_keys(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = rng.random_range(1..1u64 << 63);
        if seen.insert(k) {
            out.push(k);
        }
    }
    out
}

/// `n` ranks in `[0, universe)`, rank 0 the most popular, with
/// `P(r) ∝ (r + 1)^-theta`. Sampling is rejection-inversion.
pub fn zipf_keys(n: usize, theta: f64, universe: u64, seed: u64) -> Result<Vec<u64>> {
    let dist = Zipf::new(universe as f64, theta)
        .map_err(|e| TreeError::Contract(format!("zipf(theta={theta}, n={universe}): {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| dist.sample(&mut rng) as u64 - 1).collect())
}
