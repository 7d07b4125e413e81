//! Seedable random source shared by every stochastic routine.
//!
//! The generator is ChaCha8 (`rand_chacha`), seeded from a `u64` through
//! `SeedableRng::seed_from_u64`. Its output stream is fixed by the algorithm,
//! so a seed reproduces the same numbers on every platform.
//!
//! Derived distributions are computed here rather than through `rand_distr`
//! so that their exact arithmetic is pinned:
//!
//! * uniform `[0, 1)`: top 53 bits of `next_u64` scaled by `2^-53`;
//! * Gaussian: Box–Muller, `sqrt(-2 ln u1) * cos(2π u2)` with `u1 ∈ (0, 1]`,
//!   one draw per pair (the sine branch is discarded so that the state is
//!   exactly the ChaCha word position);
//! * integer in `[0, n)`: rejection sampling on `u64` words.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

/// Serializable snapshot of an [`Rng`], enough to resume the exact stream.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn normal(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    pub fn normal_f64(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, len: usize) -> Vec<f32> {
        (0..len).map(|_| self.normal()).collect()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Fisher–Yates shuffle driven by [`Rng::below`].
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Independent child generator seeded from this one's stream.
    pub fn fork(&mut self) -> Rng {
        Rng::seed_from_u64(self.next_u64())
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { inner }
    }
}

impl RngState {
    /// Hex text form: `seed:stream:word_pos`.
    pub fn encode(&self) -> String {
        format!("{}:{:x}:{:x}", hex::encode(self.seed), self.stream, self.word_pos)
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("malformed rng state {text:?}"));
        let mut parts = text.split(':');
        let seed_hex = parts.next().ok_or_else(bad)?;
        let stream = parts.next().ok_or_else(bad)?;
        let word_pos = parts.next().ok_or_else(bad)?;
        if parts.next().is_some() {
            return Err(bad());
        }
        let bytes = hex::decode(seed_hex).map_err(|_| bad())?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| bad())?;
        Ok(RngState {
            seed,
            stream: u64::from_str_radix(stream, 16).map_err(|_| bad())?,
            word_pos: u128::from_str_radix(word_pos, 16).map_err(|_| bad())?,
        })
    }
}
