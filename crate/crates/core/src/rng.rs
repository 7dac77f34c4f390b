//! Reproducible random streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Counter-addressable random stream.
///
/// The state is fully described by `(seed, stream, counter)`, where `counter`
/// is the ChaCha word position, so a stream can be re-created mid-sequence on
/// any platform.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    /// Stream keyed by a name, e.g. `"dropout/epoch3/step1/pass2"`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::with_stream(seed, fnv1a(name.as_bytes()))
    }

    /// Rebuilds the exact state of a stream from its counter.
    pub fn at(seed: u64, stream: u64, counter: u128) -> Self {
        let mut s = Self::with_stream(seed, stream);
        s.rng.set_word_pos(counter);
        s
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Child stream derived from this one's seed and a name.
    pub fn fork(&self, name: &str) -> Self {
        Self::with_stream(
            self.seed ^ self.stream.rotate_left(17),
            fnv1a(name.as_bytes()),
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
