//! Counter-based random streams.
//!
//! A [`RngKey`] names a substream by `(seed, stream id)`; drawing at a given
//! step positions the ChaCha block counter, so every draw is a pure function
//! of `(seed, stream, step)` and independent of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngKey {
    pub seed: u64,
    pub stream: u64,
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngKey {
    pub fn new(seed: u64) -> Self {
        Self { seed, stream: 0 }
    }

    /// Child stream; distinct labels give distinct streams with overwhelming probability.
    pub fn fork(self, label: u64) -> Self {
        let stream =
            mix64(self.stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix64(label.wrapping_add(1)));
        Self {
            seed: self.seed,
            stream,
        }
    }

    /// Generator positioned at `step`; each step owns 2^32 words of keystream.
    pub fn rng_at(self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos((step as u128) << 32);
        rng
    }

    pub fn rng(self) -> ChaCha8Rng {
        self.rng_at(0)
    }
}

/// Inverse-CDF draw from a probability row.
pub fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding can leave acc slightly below 1; fall back to the last positive entry
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}
