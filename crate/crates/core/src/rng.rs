//! Seeded random stream shared by initialization, gate noise and shuffling.
//!
//! The generator is ChaCha8 (`rand_chacha`), seeded from a `u64` through
//! `SeedableRng::seed_from_u64`. On top of its `u64` output:
//!
//! * uniforms in `[0, 1)` take the top 53 bits: `(x >> 11) * 2^-53`;
//! * Gaussians use the Box–Muller cosine branch,
//!   `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, one sample per two uniforms with
//!   nothing cached between calls;
//! * bounded integers use rejection sampling on whole `u64` words;
//! * permutations are Fisher–Yates from the last index down.
//!
//! None of these steps depend on pointer width or endianness, so a seed yields
//! the same stream on every platform.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    /// `<64 hex chars>:<word position>`.
    pub fn encode(&self) -> String {
        let hex: String = self.key.iter().map(|b| format!("{b:02x}")).collect();
        format!("{hex}:{}", self.word_pos)
    }

    pub fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed rng state `{s}`"));
        let (hex, pos) = s.trim().split_once(':').ok_or_else(bad)?;
        if hex.len() != 64 {
            return Err(bad());
        }
        let mut key = [0u8; 32];
        for (i, byte) in key.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos = pos.parse().map_err(|_| bad())?;
        Ok(Self { key, word_pos })
    }
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.inner.get_seed(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Independent child stream seeded from this one.
    pub fn fork(&mut self) -> Rng {
        Rng::new(self.next_u64())
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal with standard deviation `std`, resampled until within `2 * std`.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let r = self.next_u64();
            if r <= zone {
                return r % n;
            }
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i as u64 + 1) as usize;
            idx.swap(i, j);
        }
        idx
    }
}
