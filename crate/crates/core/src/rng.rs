//! Seedable Gaussian stream.
//!
//! Uniforms come from ChaCha20 (a counter-based, platform-independent
//! generator). Normals use the Box–Muller transform: for uniforms
//! `u1 ∈ (0, 1]`, `u2 ∈ [0, 1)`, the pair
//! `sqrt(-2 ln u1) · (cos 2πu2, sin 2πu2)` is two independent standard
//! normals. Both outputs of each pair are consumed in order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub struct GaussianStream {
    rng: ChaCha20Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Derives an independent stream from a base seed and a sub-stream tag.
    pub fn derived(seed: u64, tag: u64) -> Self {
        Self::new(mix_seed(seed, tag))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }
}

/// SplitMix64 finalizer over `seed ^ tag`; used to derive per-purpose seeds.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
