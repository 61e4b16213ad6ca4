//! Seeded, platform-independent pseudo-random number generation.
//!
//! Every random choice in the pipeline (weight init, patch offsets, synthetic
//! image content) flows through this one generator so a run is fully
//! reproducible from its seed on any platform. The algorithm is pinned:
//!
//! - state update: SplitMix64 (Steele, Lea & Flood), the 64-bit finalizer
//!   `z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27; z *= 0x94D049BB133111EB;
//!   z ^= z>>31` over a Weyl sequence with increment `0x9E3779B97F4A7C15`;
//! - uniform doubles take the top 53 bits: `(z >> 11) * 2^-53` in `[0, 1)`;
//! - normal samples use the Box–Muller transform, consuming exactly two
//!   uniforms per sample (no caching of the second deviate).

use crate::scalar::Scalar;
// Resolves f64 math in no_std builds; shadowed by std's inherent methods
// whenever the build graph links std (e.g. under dev-dependencies).
#[allow(unused_imports)]
use num_traits::Float;

const WEYL: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 generator with a Box–Muller normal sampler.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(WEYL);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    ///
    /// Plain modulo reduction: the tiny bias is irrelevant here and the
    /// fixed consumption of exactly one `u64` keeps fixtures portable.
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal deviate via Box–Muller (two uniforms per call).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]: keeps ln finite
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (core::f64::consts::TAU * u2).cos()
    }

    /// Normal deviate scaled into the tensor element type.
    pub fn next_normal_scaled<T: Scalar>(&mut self, std: f64) -> T {
        T::from_f64(self.next_normal() * std)
    }
}
