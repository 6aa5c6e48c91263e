//! Seeded pseudo-random stream used everywhere a result depends on chance.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood). It is small enough to
//! reimplement bit-for-bit in any language, which keeps fold plans, head
//! initialisation and augmentation streams reproducible outside this crate.
//!
//! Derived conventions, fixed so they can be replicated:
//!
//! * `next_f64` takes the top 53 bits: `(x >> 11) * 2^-53`, giving `[0, 1)`.
//! * `below(n)` is the multiply-high reduction `(x * n) >> 64`.
//! * `shuffle` is the descending Fisher–Yates: for `i = n-1 .. 1`,
//!   swap `i` with `below(i + 1)`.
//! * Substreams come from [`derive_seed`], which folds each extra key into
//!   the parent seed through the SplitMix64 finaliser.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a parent seed with a path of integer keys into an independent seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(mix64(seed ^ GOLDEN_GAMMA), |acc, &k| {
        mix64(acc.wrapping_add(GOLDEN_GAMMA).wrapping_add(mix64(k)))
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Generator for the substream identified by `keys` under `seed`.
    pub fn derived(seed: u64, keys: &[u64]) -> Self {
        Self::new(derive_seed(seed, keys))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`; returns `lo` when the interval is empty.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// `true` with probability `p`. Always consumes one draw.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Standard normal deviate via Box–Muller (one value per two draws).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
