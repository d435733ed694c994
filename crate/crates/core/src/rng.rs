//! Seeded randomness with a fully specified derivation.
//!
//! Every random decision in the crate (subset sampling, exploration, replay
//! sampling, shuffles, mock corruption, weight init) goes through
//! [`SeededRng`], a SplitMix64 stream seeded directly with the user seed.
//! The derived operations are defined here so another implementation can
//! reproduce them bit for bit:
//!
//! * `unit()`: `(next_u64() >> 11) * 2^-53`, uniform in `[0, 1)`.
//! * `below(n)`: rejection sampling; draw `x`, accept when
//!   `x < 2^64 - (2^64 mod n)`, return `x mod n`.
//! * `shuffle`: Fisher-Yates from the back, `j = below(i + 1)` for
//!   `i = len-1 .. 1`.
//! * `choose_distinct(n, k)`: partial Fisher-Yates over `0..n` from the
//!   front, `j = i + below(n - i)` for `i = 0 .. k-1`; the first `k` slots.
//! * `SeededRng::stream(seed, id)`: seed `seed ^ mix(id)` where `mix` is one
//!   SplitMix64 output step applied to `id`.

use rand_core::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: SplitMix64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 finalization step.
pub fn mix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: SplitMix64::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(seed, id)`, e.g. one per sentence.
    pub fn stream(seed: u64, id: u64) -> Self {
        Self::new(seed ^ mix64(id))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let limit = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= limit {
                return (x % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n}");
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}
