//! Cosine variance schedule, derived diffusion coefficients, and the
//! learning-rate warmup curve.
//!
//! Coefficients are accumulated in `f64`. Per-step `β_t` is capped at
//! [`MAX_BETA`] and `ᾱ_t` is then rebuilt as the running product of the
//! clipped `α_t`, so `ᾱ_T` stays strictly positive even though the raw
//! cosine curve reaches zero at `t = T`.

use std::f64::consts::FRAC_PI_2;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_OFFSET: f64 = 0.008;
pub const DEFAULT_TIMESTEPS: usize = 1000;
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    timesteps: usize,
    offset: f64,
    // All vectors have length T+1 and are indexed by t; entry 0 is the
    // clean-data state (ᾱ_0 = α_0 = 1, β_0 = σ_0 = 0).
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    sigma: Vec<f64>,
}

/// Unclipped cosine curve ᾱ(t), normalized so that ᾱ(0) = 1.
pub fn cosine_alpha_bar(t: f64, timesteps: usize, offset: f64) -> f64 {
    let f = |t: f64| (((t / timesteps as f64 + offset) / (1.0 + offset)) * FRAC_PI_2).cos();
    let ratio = f(t) / f(0.0);
    ratio * ratio
}

impl NoiseSchedule {
    pub fn cosine(timesteps: usize, offset: f64) -> Result<Self> {
        if timesteps == 0 {
            return Err(Error::invalid("schedule needs at least one timestep"));
        }
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::invalid(format!(
                "schedule offset must be positive, got {offset}"
            )));
        }

        let mut alpha_bar = Vec::with_capacity(timesteps + 1);
        let mut alpha = Vec::with_capacity(timesteps + 1);
        let mut beta = Vec::with_capacity(timesteps + 1);
        alpha_bar.push(1.0);
        alpha.push(1.0);
        beta.push(0.0);

        let mut prev_raw = 1.0;
        let mut running = 1.0;
        for t in 1..=timesteps {
            let raw = cosine_alpha_bar(t as f64, timesteps, offset);
            let b = (1.0 - raw / prev_raw).min(MAX_BETA);
            let a = 1.0 - b;
            running *= a;
            alpha.push(a);
            beta.push(b);
            alpha_bar.push(running);
            prev_raw = raw;
        }

        let mut sigma = vec![0.0; timesteps + 1];
        for t in 1..=timesteps {
            let var = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
            sigma[t] = var.max(0.0).sqrt();
        }

        Ok(Self {
            timesteps,
            offset,
            alpha_bar,
            alpha,
            beta,
            sigma,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    /// ᾱ_t for `t ∈ [0, T]`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    /// Posterior standard deviation; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// `(√ᾱ_t, √(1−ᾱ_t))` for `t ∈ [1, T]`.
    pub fn marginal_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        Ok(self.marginal_coeffs_unchecked(t))
    }

    pub(crate) fn marginal_coeffs_unchecked(&self, t: usize) -> (f64, f64) {
        let ab = self.alpha_bar[t];
        (ab.sqrt(), (1.0 - ab).sqrt())
    }

    /// Writes `t,beta,alpha,alpha_bar,sigma` with one row per `t ∈ [1, T]`,
    /// values truncated to 32-bit floats.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,beta,alpha,alpha_bar,sigma")?;
        for t in 1..=self.timesteps {
            writeln!(
                out,
                "{t},{},{},{},{}",
                self.beta[t] as f32, self.alpha[t] as f32, self.alpha_bar[t] as f32, self.sigma[t] as f32
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmupSpec {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
}

impl WarmupSpec {
    pub fn new(base_lr: f64, total_steps: usize, warmup_fraction: f64) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::invalid(format!("base_lr must be positive, got {base_lr}")));
        }
        if !(warmup_fraction > 0.0 && warmup_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "warmup_fraction must lie in (0, 1), got {warmup_fraction}"
            )));
        }
        Ok(Self {
            base_lr,
            total_steps,
            warmup_fraction,
        })
    }

    pub fn warmup_steps(&self) -> f64 {
        self.warmup_fraction * self.total_steps as f64
    }

    /// Linear ramp from 0 to `base_lr` over the warmup window, flat afterwards.
    pub fn lr(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::invalid(format!(
                "step {step} beyond total_steps {}",
                self.total_steps
            )));
        }
        let warm = self.warmup_steps();
        let s = step as f64;
        if s >= warm {
            Ok(self.base_lr)
        } else {
            Ok(self.base_lr * s / warm)
        }
    }
}
