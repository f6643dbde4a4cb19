//! Timestep distributions and mappings.
//!
//! Noise level `t ∈ [0, 1]` follows the linear interpolant
//! `x_t = (1−t)·x_0 + t·ε`, so `logSNR(t) = ln((1−t)/t)` and `t = σ(−λ)`.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ScheduleSpec {
    pub mu_min: f64,
    pub mu_max: f64,
    /// Lower truncation point of the training distribution.
    pub truncation: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub steps: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { mu_min: 0.5, mu_max: 1.15, truncation: 0.075, lambda_min: -6.2, lambda_max: 2.0, steps: 8 }
    }
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.truncation > 0.0 && self.truncation < 1.0) {
            bail!(InvalidArgument, "truncation must lie in (0,1), got {}", self.truncation);
        }
        if !(self.lambda_min < self.lambda_max) {
            bail!(InvalidArgument, "lambda_min must be below lambda_max");
        }
        if self.steps == 0 {
            bail!(InvalidArgument, "at least one inference step is required");
        }
        if !(self.mu_min <= self.mu_max) {
            bail!(InvalidArgument, "mu_min must not exceed mu_max");
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn logsnr(t: f64) -> f64 {
    libm::log((1.0 - t) / t)
}

#[inline]
pub fn t_from_logsnr(lambda: f64) -> f64 {
    sigmoid(-lambda)
}

/// `1 − e^{−μ} / (e^{−μ} + t/(1−t))`; the endpoints map to themselves.
pub fn shift_timestep(t: f64, mu: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        return t;
    }
    let a = libm::exp(-mu);
    let r = t / (1.0 - t);
    r / (a + r)
}

/// Linear interpolation of μ over frame counts, clamped to `[len_min, len_max]`.
pub fn mu_for_length(len: usize, len_min: usize, len_max: usize, spec: &ScheduleSpec) -> f64 {
    if len_max <= len_min {
        return spec.mu_max;
    }
    let l = len.clamp(len_min, len_max);
    let frac = (l - len_min) as f64 / (len_max - len_min) as f64;
    spec.mu_min + (spec.mu_max - spec.mu_min) * frac
}

/// Truncated logit-normal: reject `σ(z) < t_c`, then rescale affinely onto `[0,1]`.
pub fn sample_timestep_train(rng: &mut Rng, spec: &ScheduleSpec) -> f64 {
    let tc = spec.truncation;
    loop {
        let t = sigmoid(rng::normal(rng));
        if t >= tc {
            return ((t - tc) / (1.0 - tc)).clamp(0.0, 1.0);
        }
    }
}

/// Plain logit-normal `σ(z)`.
pub fn sample_timestep_disc(rng: &mut Rng) -> f64 {
    sigmoid(rng::normal(rng))
}

/// `N+1` timesteps, uniform in logSNR from `lambda_min` to `lambda_max`, descending in `t`.
pub fn inference_schedule(spec: &ScheduleSpec) -> Vec<f64> {
    let n = spec.steps.max(1);
    (0..=n)
        .map(|i| {
            let lambda = spec.lambda_min + i as f64 * (spec.lambda_max - spec.lambda_min) / n as f64;
            t_from_logsnr(lambda)
        })
        .collect()
}

/// `(λ_i, t_i)` pairs of [`inference_schedule`].
pub fn schedule_table(spec: &ScheduleSpec) -> Vec<(f64, f64)> {
    inference_schedule(spec).into_iter().map(|t| (logsnr(t), t)).collect()
}
