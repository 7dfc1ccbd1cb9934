//! Counter-based random streams.
//!
//! A stream is a 64-bit key plus a counter. The `n`-th output is the
//! SplitMix64 finalizer applied to `key + (n + 1)·γ` with
//! `γ = 0x9E3779B97F4A7C15`, which is exactly the SplitMix64 sequence seeded
//! with `key`. Child streams are derived by hashing the parent key with a
//! stream id, so any (seed, path-of-ids) addresses a fixed stream regardless
//! of how many values other streams have consumed.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Lower clamp applied to uniform draws before they feed a double log.
pub const UNIFORM_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            key: mix64(seed ^ 0x6A09_E667_F3BC_C908),
            counter: 0,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream addressed by `id`. Does not advance `self`.
    pub fn split(&self, id: u64) -> Rng {
        Rng {
            seed: self.seed,
            key: mix64(self.key ^ mix64(id.wrapping_add(GAMMA))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[1e−12, 1 − 1e−12]`.
    pub fn open_uniform(&mut self) -> f64 {
        self.uniform().clamp(UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Lemire's multiply-shift; bias is < 2^-64·n, irrelevant at these sizes.
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
