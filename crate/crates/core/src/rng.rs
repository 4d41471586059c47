//! Seeded, stream-split randomness.
//!
//! Every stochastic consumer (data shuffling, interpolation noise, time
//! draws, evaluation probes) owns a distinct ChaCha stream of the run seed,
//! so adding draws to one consumer never shifts another. A stream's position
//! can be snapshotted and restored, which is what makes checkpoint resume
//! bit-exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Fixed stream ids for the training loop.
pub const STREAM_DATA: u64 = 0;
pub const STREAM_NOISE: u64 = 1;
pub const STREAM_TIMES: u64 = 2;
/// Evaluation at training step `s` uses stream `STREAM_EVAL_BASE + s`, so
/// probe draws never disturb the training streams.
pub const STREAM_EVAL_BASE: u64 = 16;

/// A ChaCha8 generator that remembers how to recreate itself.
#[derive(Debug, Clone)]
pub struct StreamRng {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl StreamRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn snapshot(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.seed,
            stream: self.stream,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(snap: &RngSnapshot) -> Self {
        let mut s = Self::new(snap.seed, snap.stream);
        s.rng.set_word_pos(snap.word_pos);
        s
    }

    /// `n` standard normal draws in order.
    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample(StandardNormal)).collect()
    }

    /// `n` uniform draws from `[lo, hi)` in order.
    pub fn uniform_vec(&mut self, lo: f64, hi: f64, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(lo..hi)).collect()
    }
}

/// Serializable position of a [`StreamRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}
