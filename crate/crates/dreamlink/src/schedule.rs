//! Noise-schedule construction and the closed-form diffusion algebra the
//! rest of the library relies on.
//!
//! A [`DiffusionSchedule`] holds per-step constants for `t ∈ {1..T}`:
//! `beta[t]` (noise variance added at step t), `alpha[t] = 1 − beta[t]`,
//! `alpha_bar[t] = ∏ alpha[s]` (running product, with `alpha_bar[0] := 1`),
//! and `sigma[t]` (reverse-step noise scale). Three closed-form operations
//! cover the whole diffusion algebra:
//!
//! - forward:   `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`
//! - inversion: `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`
//! - reverse:   `z_{t−1} = (1/√α_t)·(z_t − ((1−α_t)/√(1−ᾱ_t))·ε̂) + σ_t·n`

use crate::error::{Error, Result};
use crate::grid::LatentGrid;
use serde::{Deserialize, Serialize};

/// Default number of training timesteps.
pub const DEFAULT_TRAIN_STEPS: usize = 1000;
/// Default linear-schedule endpoints.
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;
/// Default number of inference steps realized by a strided sub-schedule.
pub const DEFAULT_INFER_STEPS: usize = 50;

/// How the reverse-step noise scale `sigma[t]` is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// Posterior variance `σ_t² = β_t·(1−ᾱ_{t−1})/(1−ᾱ_t)`; `σ_1 = 0`
    /// because `ᾱ_0 := 1`.
    #[default]
    Posterior,
    /// Upper bound `σ_t² = β_t`.
    Beta,
}

/// Per-timestep noise-schedule constants, 1-indexed by timestep.
///
/// `raw_timesteps[i−1]` maps schedule index `i` to the timestep value fed to
/// models for embedding: the identity for a training schedule, and the
/// original training-schedule timestep for a strided inference sub-schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
    pub raw_timesteps: Vec<usize>,
    pub sigma_mode: SigmaMode,
}

/// Build a schedule with `t_steps` linearly spaced betas.
///
/// `beta[t]` interpolates `beta_start → beta_end` inclusive (constant when
/// `t_steps == 1`); `alpha_bar` is an exact running product.
pub fn make_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
    sigma_mode: SigmaMode,
) -> Result<DiffusionSchedule> {
    if t_steps < 1 {
        return Err(Error::Validation("schedule needs at least 1 step".into()));
    }
    if !(beta_start > 0.0 && beta_start < 1.0 && beta_end > 0.0 && beta_end < 1.0) {
        return Err(Error::Validation(format!(
            "beta endpoints must lie in (0,1), got {beta_start} and {beta_end}"
        )));
    }
    if beta_start > beta_end {
        return Err(Error::Validation(format!(
            "beta_start {beta_start} must not exceed beta_end {beta_end}"
        )));
    }
    let mut beta = Vec::with_capacity(t_steps);
    for i in 0..t_steps {
        let frac = if t_steps == 1 {
            0.0
        } else {
            i as f64 / (t_steps - 1) as f64
        };
        beta.push(beta_start + (beta_end - beta_start) * frac);
    }
    Ok(from_betas(beta, (1..=t_steps).collect(), sigma_mode))
}

/// Assemble a schedule from explicit betas: alpha, running-product
/// alpha_bar, and sigma all derived here so invariants hold by construction.
fn from_betas(beta: Vec<f64>, raw_timesteps: Vec<usize>, sigma_mode: SigmaMode) -> DiffusionSchedule {
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(beta.len());
    let mut running = 1.0;
    for &a in &alpha {
        running *= a;
        alpha_bar.push(running);
    }
    let sigma = (0..beta.len())
        .map(|i| {
            let var = match sigma_mode {
                SigmaMode::Beta => beta[i],
                SigmaMode::Posterior => {
                    let ab_prev = if i == 0 { 1.0 } else { alpha_bar[i - 1] };
                    beta[i] * (1.0 - ab_prev) / (1.0 - alpha_bar[i])
                }
            };
            var.sqrt()
        })
        .collect();
    DiffusionSchedule {
        beta,
        alpha,
        alpha_bar,
        sigma,
        raw_timesteps,
        sigma_mode,
    }
}

impl DiffusionSchedule {
    /// Number of timesteps.
    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            Err(Error::TimestepOutOfRange { t, max: self.len() })
        } else {
            Ok(())
        }
    }

    pub fn beta_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.beta[t - 1])
    }

    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha[t - 1])
    }

    /// `ᾱ_t`, with the `ᾱ_0 := 1` boundary convention.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        self.check_t(t)?;
        Ok(self.alpha_bar[t - 1])
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.sigma[t - 1])
    }

    /// Timestep value models should embed for schedule index `t`
    /// (`t = 0` maps to 0: fully denoised).
    pub fn raw_t(&self, t: usize) -> Result<usize> {
        if t == 0 {
            return Ok(0);
        }
        self.check_t(t)?;
        Ok(self.raw_timesteps[t - 1])
    }

    /// Extract an `n`-step inference sub-schedule with evenly spaced raw
    /// timesteps `⌈i·T/n⌉` for `i = 1..=n` (so index `n` hits `T` exactly).
    ///
    /// The result is a self-consistent schedule: its `alpha[i]` is the ratio
    /// of consecutive selected `ᾱ` values, so one sub-step spans the same
    /// total noising as the skipped raw steps combined, and its `alpha_bar`
    /// is the running product of those ratios. `raw_timesteps` keeps the
    /// mapping back to the source schedule for model conditioning.
    pub fn strided(&self, n: usize) -> Result<DiffusionSchedule> {
        if n < 1 || n > self.len() {
            return Err(Error::Validation(format!(
                "strided step count {n} must lie in 1..={}",
                self.len()
            )));
        }
        let t_total = self.len();
        let raw: Vec<usize> = (1..=n)
            .map(|i| (i * t_total).div_ceil(n))
            .collect();
        let mut betas = Vec::with_capacity(n);
        let mut prev_ab = 1.0;
        for &tau in &raw {
            let ab = self.alpha_bar[tau - 1];
            betas.push(1.0 - ab / prev_ab);
            prev_ab = ab;
        }
        let mapped: Vec<usize> = raw.iter().map(|&tau| self.raw_timesteps[tau - 1]).collect();
        Ok(from_betas(betas, mapped, self.sigma_mode))
    }

    /// Forward diffusion: `z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε`.
    pub fn forward_diffuse(&self, z0: &LatentGrid, eps: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.check_t(t)?;
        if z0.data.shape() != eps.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "z0 {:?} vs eps {:?}",
                z0.data.shape(),
                eps.data.shape()
            )));
        }
        let ab = self.alpha_bar[t - 1];
        let (cs, cn) = (ab.sqrt(), (1.0 - ab).sqrt());
        LatentGrid::new(&z0.data * cs + &eps.data * cn, self.raw_timesteps[t - 1])
    }

    /// Closed-form clean estimate: `ẑ0 = (z_t − √(1−ᾱ_t)·ε̂) / √ᾱ_t`.
    ///
    /// Exact algebraic inverse of [`Self::forward_diffuse`] when `eps_hat`
    /// equals the true noise.
    pub fn estimate_clean(&self, z_t: &LatentGrid, eps_hat: &LatentGrid, t: usize) -> Result<LatentGrid> {
        self.check_t(t)?;
        if z_t.data.shape() != eps_hat.data.shape() {
            return Err(Error::ShapeMismatch(format!(
                "z_t {:?} vs eps_hat {:?}",
                z_t.data.shape(),
                eps_hat.data.shape()
            )));
        }
        let ab = self.alpha_bar[t - 1];
        LatentGrid::new((&z_t.data - &(&eps_hat.data * (1.0 - ab).sqrt())) / ab.sqrt(), 0)
    }

    /// One reverse (ancestral) step:
    /// `z_{t−1} = (1/√α_t)·(z_t − ((1−α_t)/√(1−ᾱ_t))·ε̂) + σ_t·noise`.
    ///
    /// The caller supplies `noise` (all-zeros at a stream's final step).
    pub fn ancestral_step(
        &self,
        z_t: &LatentGrid,
        eps_hat: &LatentGrid,
        noise: &LatentGrid,
        t: usize,
    ) -> Result<LatentGrid> {
        self.check_t(t)?;
        let shape = z_t.data.shape();
        if eps_hat.data.shape() != shape || noise.data.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "z_t {:?} vs eps_hat {:?} vs noise {:?}",
                shape,
                eps_hat.data.shape(),
                noise.data.shape()
            )));
        }
        let a = self.alpha[t - 1];
        let ab = self.alpha_bar[t - 1];
        let mean = (&z_t.data - &(&eps_hat.data * ((1.0 - a) / (1.0 - ab).sqrt()))) / a.sqrt();
        let out = mean + &noise.data * self.sigma[t - 1];
        let tag = if t == 1 { 0 } else { self.raw_timesteps[t - 2] };
        LatentGrid::new(out, tag)
    }
}
