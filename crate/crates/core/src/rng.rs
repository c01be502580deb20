//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `&mut Stream`; there is no
//! global generator. `split` derives an independent child stream so that
//! sub-tasks (per-seed runs, evaluation rollouts) never perturb the parent
//! sequence beyond a single draw.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn split(parent: &mut Stream) -> Stream {
    let mut seed = [0u8; 32];
    parent.fill_bytes(&mut seed);
    ChaCha8Rng::from_seed(seed)
}

/// Draw an index from an unnormalised nonnegative weight vector.
///
/// Returns `None` when the weights sum to zero (or are not finite).
pub fn categorical<R: rand::Rng + ?Sized>(rng: &mut R, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut u = rng.random::<f64>() * total;
    let mut last_positive = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last_positive = Some(i);
            if u < w {
                return Some(i);
            }
            u -= w;
        }
    }
    last_positive
}
