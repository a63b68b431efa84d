//! Seeded deterministic random stream.
//!
//! All randomness in the crate flows from [`RngStream`], a ChaCha8 stream
//! cipher generator. Identical seed and call sequence yield identical draws
//! on every platform: uniforms are built from raw 64-bit words by an explicit
//! bit manipulation and normals by the Box-Muller transform, so no
//! platform-dependent sampling code is involved.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub const ALGORITHM: &str = "chacha8/box-muller";

pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent child stream. The child seed mixes the parent
    /// seed with a label via splitmix64 so sibling streams never collide.
    pub fn fork(&self, label: u64) -> RngStream {
        let mut z = self
            .seed
            .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(label.wrapping_add(1)));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        RngStream::new(z ^ (z >> 31))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1): top 53 bits of a raw word scaled by 2^-53.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        // Modulo bias is negligible for n << 2^64 (worst case here: n ~ 2^20).
        (self.rng.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch; two uniforms per draw).
    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        let mut u1 = self.uniform();
        if u1 < 1e-300 {
            u1 = 1e-300;
        }
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        mean + std * r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Serializable generator position (word offset into the ChaCha stream).
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        for _ in 0..100 {
            assert!(a.normal(0.0, 1.0) == b.normal(0.0, 1.0));
        }
    }

    #[test]
    fn forks_are_decorrelated_and_deterministic() {
        let root = RngStream::new(7);
        let mut c1 = root.fork(0);
        let mut c2 = root.fork(1);
        let mut c1b = root.fork(0);
        assert_eq!(c1.next_u64(), c1b.next_u64());
        assert_ne!(c1.next_u64(), c2.next_u64());
    }

    #[test]
    fn word_pos_round_trip_resumes_stream() {
        let mut a = RngStream::new(3);
        for _ in 0..17 {
            a.uniform();
        }
        let pos = a.word_pos();
        let expect: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let mut b = RngStream::new(3);
        b.set_word_pos(pos);
        let got: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_eq!(expect, got);
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = RngStream::new(1);
        for _ in 0..10_000 {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
        }
    }
}
