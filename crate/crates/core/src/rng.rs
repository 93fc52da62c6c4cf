//! Counter-based Gaussian streams.
//!
//! Every normal draw is addressed by `(seed, stream, index)`: the seed picks
//! the ChaCha key, the stream is the path index and the index counts draws
//! along that path. Draws can therefore be produced in any order, on any
//! number of workers, and a stream can be resumed at an arbitrary index.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// ChaCha word position consumed by one Box-Muller pair (two u64 draws).
const WORDS_PER_PAIR: u128 = 4;

#[derive(Debug, Clone)]
pub struct NormalStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalStream {
    /// Stream positioned so the next draw is normal number `index`.
    pub fn new(seed: u64, stream: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        rng.set_word_pos((index / 2) as u128 * WORDS_PER_PAIR);
        let mut s = NormalStream { rng, spare: None };
        if index % 2 == 1 {
            s.next_normal();
        }
        s
    }

    fn uniform_open(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn next_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform_open();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }
}

/// Derives a child seed for a labelled sub-experiment (probe, stage, ...).
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    // splitmix64 finaliser over the combined word
    let mut z = seed
        ^ label
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
