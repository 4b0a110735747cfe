//! Per-iteration noise levels for the moving training target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_sphere_radius, perturb, PointCloud};
use crate::rng::mix_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Linear,
}

/// Noise level σ_t for iterations `t = 1..=T`, as a fraction of the clean
/// cloud's bounding-sphere radius. The last iteration always has σ_T = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationSchedule {
    pub iterations: usize,
    pub sigma_start: f64,
    pub decay: Decay,
}

impl IterationSchedule {
    pub fn new(iterations: usize, sigma_start: f64) -> Result<Self> {
        let s = Self {
            iterations,
            sigma_start,
            decay: Decay::Linear,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iteration count must be at least 1"));
        }
        if !(self.sigma_start >= 0.0) || !self.sigma_start.is_finite() {
            return Err(Error::invalid("sigma_start must be a finite non-negative fraction"));
        }
        Ok(())
    }

    /// σ_t, falling linearly from `sigma_start` at `t = 1` to 0 at `t = T`.
    /// With a single iteration the only level is the endpoint, 0.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let big_t = self.iterations;
        if t == 0 || t > big_t {
            return Err(Error::invalid(format!("iteration {t} outside 1..={big_t}")));
        }
        if t == big_t {
            return Ok(0.0);
        }
        match self.decay {
            Decay::Linear => Ok(self.sigma_start * (big_t - t) as f64 / (big_t - 1) as f64),
        }
    }

    pub fn sigmas(&self) -> Vec<f64> {
        (1..=self.iterations).map(|t| self.sigma(t).unwrap()).collect()
    }
}

/// The clean cloud perturbed with the level of iteration `t`.
pub fn adaptive_gt(clean: &PointCloud, t: usize, schedule: &IterationSchedule, seed: u64) -> Result<PointCloud> {
    let radius = bounding_sphere_radius(clean)?;
    adaptive_gt_with_radius(clean, t, schedule, radius, seed)
}

/// As [`adaptive_gt`], with σ_t measured against an explicit length, e.g.
/// the radius of the whole cloud when `clean` is one patch of it.
pub fn adaptive_gt_with_radius(
    clean: &PointCloud,
    t: usize,
    schedule: &IterationSchedule,
    radius: f64,
    seed: u64,
) -> Result<PointCloud> {
    let sigma = schedule.sigma(t)?;
    if sigma == 0.0 {
        return Ok(clean.clone());
    }
    Ok(perturb(clean, sigma * radius, mix_seed(seed, t as u64)))
}
