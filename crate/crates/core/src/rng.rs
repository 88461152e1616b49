//! Seedable, splittable random streams.
//!
//! Every random draw in the crate comes from a [`Stream`]: ChaCha20 keyed by
//! the 64-bit seed (little-endian in key bytes 0..8, remaining key bytes
//! zero) with the 64-bit ChaCha stream id selecting an independent
//! substream. Conversions are fixed so another implementation can replay
//! the same draws:
//!
//! * `next_u64` takes two consecutive 32-bit keystream words, low word first.
//! * `uniform()` is `(next_u64 >> 11) * 2^-53`, in `[0, 1)`.
//! * `normal()` is Box-Muller on two uniforms `u1, u2`:
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`; one normal per two uniforms.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Well-known stream ids so different consumers never share a substream.
pub mod streams {
    pub const TEMPLATE: u64 = 1;
    pub const EXPRESSION_BASIS: u64 = 2;
    /// Subject `s` uses `SUBJECT_BASE + s`.
    pub const SUBJECT_BASE: u64 = 1 << 32;
    /// Tree `t` of a forest uses `FOREST_TREE_BASE + t`.
    pub const FOREST_TREE_BASE: u64 = 2 << 32;
    pub const SVM: u64 = 3 << 32;
    pub const LSTM: u64 = 4 << 32;
}

#[derive(Clone, Debug)]
pub struct Stream {
    inner: ChaCha20Rng,
}

impl Stream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut inner = ChaCha20Rng::from_seed(key);
        inner.set_stream(stream);
        Stream { inner }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        let lo = self.inner.next_u32() as u64;
        let hi = self.inner.next_u32() as u64;
        lo | (hi << 32)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Uniform integer in `0..n` by rejection on the top bits.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let v = self.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle driven by [`Stream::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
