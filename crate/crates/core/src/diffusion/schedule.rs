//! Discretized variance-preserving diffusion process.
//!
//! A schedule stores, for every timestep `t` in `0..=num_steps`, the signal
//! scale `alpha_t` and noise scale `sigma_t` of the closed form
//! `z_t = alpha_t * z_0 + sigma_t * eps`, together with the per-step factors
//! of the equivalent one-step recursion
//! `z_t = step_alpha_t * z_{t-1} + beta_t * eps_t`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::latent::{check_shape, Latent, Noise};
use crate::error::{Error, Result};

/// Minimum number of timesteps a generation run may use; coarser schedules
/// visibly degrade sample quality.
pub const MIN_GENERATION_STEPS: u32 = 200;

/// Selects the shape of the `alpha_t` curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleProfile {
    /// `alpha_t = cos(phi_t)`, `sigma_t = sin(phi_t)` with `phi_t` linear in `t`
    /// and stopping just short of `pi/2` so that `alpha_T > 0`.
    #[default]
    Cosine,
    /// The scaled-linear beta schedule used by Stable Diffusion checkpoints
    /// (`beta` from `0.00085` to `0.012`, linear in `sqrt(beta)`).
    ScaledLinear,
}

impl ScheduleProfile {
    pub fn id(&self) -> &'static str {
        match self {
            ScheduleProfile::Cosine => "cosine",
            ScheduleProfile::ScaledLinear => "scaled_linear",
        }
    }
}

impl fmt::Display for ScheduleProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for ScheduleProfile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(ScheduleProfile::Cosine),
            "scaled_linear" => Ok(ScheduleProfile::ScaledLinear),
            other => Err(Error::InvalidArgument(format!("unknown schedule profile {other:?}"))),
        }
    }
}

/// Fraction of a quarter turn covered by the cosine profile at `t = T`.
const COSINE_END: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    num_steps: u32,
    profile: ScheduleProfile,
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
    /// `step_alphas[t] = alphas[t] / alphas[t-1]`; entry 0 is 1.
    step_alphas: Vec<f64>,
    /// Per-step noise scale; entry 0 is 0.
    betas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(num_steps: u32, profile: ScheduleProfile) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidArgument("num_steps must be positive".into()));
        }
        if num_steps < MIN_GENERATION_STEPS {
            tracing::warn!(
                num_steps,
                "schedules coarser than {MIN_GENERATION_STEPS} steps degrade generation quality"
            );
        }
        let n = num_steps as usize;
        let (alphas, sigmas): (Vec<f64>, Vec<f64>) = match profile {
            ScheduleProfile::Cosine => (0..=n)
                .map(|t| {
                    let phi = std::f64::consts::FRAC_PI_2 * COSINE_END * t as f64 / n as f64;
                    (phi.cos(), phi.sin())
                })
                .unzip(),
            ScheduleProfile::ScaledLinear => {
                let (lo, hi) = (0.00085f64.sqrt(), 0.012f64.sqrt());
                let mut alpha_bar = 1.0f64;
                let mut alphas = vec![1.0];
                let mut sigmas = vec![0.0];
                for i in 0..n {
                    let frac = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
                    let b = lo + (hi - lo) * frac;
                    alpha_bar *= 1.0 - b * b;
                    alphas.push(alpha_bar.sqrt());
                    sigmas.push((1.0 - alpha_bar).sqrt());
                }
                (alphas, sigmas)
            }
        };
        let mut step_alphas = vec![1.0; n + 1];
        let mut betas = vec![0.0; n + 1];
        for t in 1..=n {
            let a = alphas[t] / alphas[t - 1];
            step_alphas[t] = a;
            // sigma_t^2 = a^2 sigma_{t-1}^2 + beta_t^2, which under the
            // variance-preserving relation reduces to 1 - a^2.
            betas[t] = (sigmas[t] * sigmas[t] - a * a * sigmas[t - 1] * sigmas[t - 1])
                .max(0.0)
                .sqrt();
        }
        Ok(Self {
            num_steps,
            profile,
            alphas,
            sigmas,
            step_alphas,
            betas,
        })
    }

    pub fn num_steps(&self) -> u32 {
        self.num_steps
    }

    pub fn profile(&self) -> ScheduleProfile {
        self.profile
    }

    pub fn alpha(&self, t: u32) -> f64 {
        self.alphas[t as usize]
    }

    pub fn sigma(&self, t: u32) -> f64 {
        self.sigmas[t as usize]
    }

    pub fn step_alpha(&self, t: u32) -> f64 {
        self.step_alphas[t as usize]
    }

    pub fn beta(&self, t: u32) -> f64 {
        self.betas[t as usize]
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub(crate) fn check_timestep(&self, t: u32) -> Result<()> {
        if t > self.num_steps {
            return Err(Error::InvalidTimestep(format!(
                "{t} exceeds schedule length {}",
                self.num_steps
            )));
        }
        Ok(())
    }

    /// Closed-form noising of a clean latent to timestep `t`.
    pub fn forward_diffuse(&self, z0: &Latent, t: u32, eps: &Noise) -> Result<Latent> {
        if z0.timestep != 0 {
            return Err(Error::InvalidTimestep(format!(
                "forward_diffuse expects a clean latent, got timestep {}",
                z0.timestep
            )));
        }
        self.check_timestep(t)?;
        check_shape(z0.shape(), eps.dim())?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        let mut data = z0.data.clone();
        data.zip_mut_with(eps, |z, e| *z = a * *z + s * e);
        Ok(Latent { data, timestep: t })
    }

    /// One step of the forward recursion, `z_{t-1} -> z_t`.
    pub fn forward_diffuse_step(&self, z_prev: &Latent, eps_t: &Noise) -> Result<Latent> {
        if z_prev.timestep >= self.num_steps {
            return Err(Error::InvalidTimestep(format!(
                "latent already at final timestep {}",
                self.num_steps
            )));
        }
        check_shape(z_prev.shape(), eps_t.dim())?;
        let t = z_prev.timestep + 1;
        let (a, b) = (self.step_alpha(t), self.beta(t));
        let mut data = z_prev.data.clone();
        data.zip_mut_with(eps_t, |z, e| *z = a * *z + b * e);
        Ok(Latent { data, timestep: t })
    }

    /// Evenly spaced integer timesteps from `t_from` down to `t_to` inclusive,
    /// `substeps` jumps in total. Duplicates from rounding are removed.
    pub fn trajectory(t_from: u32, t_to: u32, substeps: u32) -> Vec<u32> {
        let substeps = substeps.max(1).min(t_from.saturating_sub(t_to).max(1));
        let span = (t_from - t_to) as f64;
        let mut ts: Vec<u32> = (0..=substeps)
            .map(|k| {
                let frac = k as f64 / substeps as f64;
                (t_from as f64 - span * frac).round() as u32
            })
            .collect();
        ts.dedup();
        ts
    }
}
