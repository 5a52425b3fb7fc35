//! The repository-wide PRNG.
//!
//! Every random draw goes through ChaCha8 seeded from a `u64`. Independent
//! streams (per episode, per Monte-Carlo block, per evaluation batch) are
//! derived with [`stream`], so parallel work never shares a generator and the
//! output is identical whether the work ran on one thread or many.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for stream `id` under `seed`. Streams are disjoint for distinct ids.
pub fn stream(seed: u64, id: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Derive a child seed from a parent seed and a label, e.g. one seed per pipeline stage.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the parent seed through splitmix64.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(seed ^ h)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Draw an index from a discrete distribution by inverse CDF.
///
/// `probs` need not be normalised exactly; the last index with positive mass
/// absorbs rounding so that a draw never falls off the end.
pub fn categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn uniform_index(n: usize, rng: &mut Rng) -> usize {
    rng.random_range(0..n)
}
