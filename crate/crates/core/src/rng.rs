//! Seed contract.
//!
//! A run is driven by one `u64` seed. The generator for step `s` and
//! stream index `e` (an episode, or a prompt in evaluation) is
//! `ChaCha8Rng::seed_from_u64(substream_seed(seed, s, e))`, where
//!
//! ```text
//! mix(z)  = z ^= z >> 30; z *= 0xbf58476d1ce4e5b9;
//!           z ^= z >> 27; z *= 0x94d049bb133111eb;
//!           z ^ (z >> 31)                         (wrapping u64 arithmetic)
//! h0      = mix(seed + 0x9e3779b97f4a7c15)
//! h1      = mix(h0 ^ (s + 0x9e3779b97f4a7c15))
//! seed'   = mix(h1 ^ (e + 0xd1b54a32d192ed03))
//! ```
//!
//! Substreams depend only on `(seed, s, e)`, so episodes can be generated in
//! any order or in parallel with identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const STREAM: u64 = 0xd1b5_4a32_d192_ed03;

/// The splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the substream for `(seed, step, index)`.
pub fn substream_seed(seed: u64, step: u64, index: u64) -> u64 {
    let h0 = mix64(seed.wrapping_add(GOLDEN));
    let h1 = mix64(h0 ^ step.wrapping_add(GOLDEN));
    mix64(h1 ^ index.wrapping_add(STREAM))
}

/// Generator of the substream for `(seed, step, index)`.
pub fn substream(seed: u64, step: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(seed, step, index))
}

/// All substreams of one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepStreams {
    pub seed: u64,
    pub step: u64,
}

impl StepStreams {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step }
    }

    pub fn stream(&self, index: u64) -> ChaCha8Rng {
        substream(self.seed, self.step, index)
    }
}

/// Index drawn from `probs` by inversion of a uniform in `[0, 1)`: the
/// smallest index whose cumulative mass exceeds `u`. Mass lost to rounding
/// falls on the last index with positive probability.
pub fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

/// One uniform in `[0, 1)` from `rng`.
pub fn uniform(rng: &mut impl Rng) -> f64 {
    rng.random::<f64>()
}
