//! Deterministic counter-based random number generation.
//!
//! Generator id: **`splitmix64-ctr/v1`** (recorded in dataset headers).
//!
//! The i-th raw output of a stream with key `k` is
//! `finalize(k + (i+1)·GOLDEN)` where `finalize` is the SplitMix64
//! finalizer — exactly the classic sequential SplitMix64 sequence seeded
//! with `k`, but addressable by counter. Substreams are derived by
//! `derive(key, index)`, a two-level finalizer mix with distinct
//! constants, so e.g. task i of a dataset owns its own stream and can be
//! regenerated without replaying tasks 0..i−1.
//!
//! Conventions (all frozen by tests, since file formats pin them):
//! * `unit_f64` = high 53 bits / 2⁵³ → [0, 1)
//! * `normal` = Box–Muller cosine branch, consuming exactly two raw
//!   outputs per draw: r=√(−2·ln(1−u₁)), z=r·cos(2π·u₂)
//! * `dirichlet` (symmetric, α=1) = normalized Exp(1) draws, where
//!   Exp(1) = −ln(1−u)

/// The name recorded in file headers for this generator/convention set.
pub const GENERATOR_ID: &str = "splitmix64-ctr/v1";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const DERIVE_SALT: u64 = 0xD6E8_FEB8_6659_FD93;
const DERIVE_STEP: u64 = 0xA5A3_564E_4A9A_E34B;

/// SplitMix64 output finalizer.
#[inline]
fn finalize(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// Derive the key of a named substream. Used for per-task, per-step and
/// per-purpose streams; documented because dataset files depend on it.
#[inline]
pub fn derive(key: u64, index: u64) -> u64 {
    finalize(finalize(key ^ DERIVE_SALT).wrapping_add(index.wrapping_mul(DERIVE_STEP)))
}

/// A counter-based random stream. Copy-cheap; cloning forks the position.
#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(key: u64) -> Self {
        Stream { key, counter: 0 }
    }

    /// Stream for substream `index` of this stream's key.
    pub fn substream(&self, index: u64) -> Stream {
        Stream::new(derive(self.key, index))
    }

    /// Raw 64-bit output (advances the counter).
    pub fn next_u64(&mut self) -> u64 {
        self.counter += 1;
        finalize(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit_f64()
    }

    /// Standard normal draw (Box–Muller cosine branch, two raw outputs).
    pub fn normal(&mut self) -> f64 {
        let u1 = self.unit_f64();
        let u2 = self.unit_f64();
        let r = (-2.0 * (1.0 - u1).ln()).sqrt();
        r * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Index draw proportional to non-negative `weights` (one raw output).
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        debug_assert!(!weights.is_empty());
        let total: f64 = weights.iter().sum();
        let mut u = self.unit_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }

    /// Symmetric Dirichlet(α=1) over `n` categories: normalized Exp(1) draws.
    pub fn dirichlet(&mut self, n: usize) -> Vec<f64> {
        debug_assert!(n > 0);
        let mut e: Vec<f64> = (0..n).map(|_| -(1.0 - self.unit_f64()).ln()).collect();
        let total: f64 = e.iter().sum();
        for v in &mut e {
            *v /= total;
        }
        e
    }

    /// Fair coin (one raw output).
    pub fn coin(&mut self) -> bool {
        self.next_u64() & 1 == 1
    }
}
