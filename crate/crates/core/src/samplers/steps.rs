//! Single backward transfer steps.
//!
//! Every step is written in terms of the pair (ᾱ_from, ᾱ_to) so that coarse
//! grids and shifted timesteps share one code path. `ᾱ_to = 1` marks the end
//! of the chain.

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// Backward-kernel coefficients of one DDPM step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorParams {
    /// Effective α = ᾱ_from / ᾱ_to.
    pub alpha: f64,
    pub alpha_bar: f64,
    pub alpha_bar_prev: f64,
    /// Coefficient of ε̂ inside the mean, (1−α)/√(1−ᾱ).
    pub eps_coef: f64,
    /// β̃ = (1−ᾱ_prev)/(1−ᾱ)·(1−α), floored at zero.
    pub variance: f64,
    /// Set when α ≥ 1 forced the variance to zero.
    pub clamped: bool,
}

impl PosteriorParams {
    pub fn new(alpha_bar: f64, alpha_bar_prev: f64) -> Result<Self> {
        check_alpha_bar(alpha_bar)?;
        let alpha = alpha_bar / alpha_bar_prev;
        let raw = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha);
        Ok(Self {
            alpha,
            alpha_bar,
            alpha_bar_prev,
            eps_coef: (1.0 - alpha) / (1.0 - alpha_bar).sqrt(),
            variance: raw.max(0.0),
            clamped: alpha >= 1.0,
        })
    }

    pub fn from_schedule(schedule: &NoiseSchedule, t: usize, t_prev: Option<usize>) -> Result<Self> {
        Self::new(schedule.alpha_bar(t), schedule.alpha_bar_at(t_prev))
    }

    /// ∂x_prev/∂ε̂.
    pub fn state_gain(&self) -> f64 {
        -self.eps_coef / self.alpha.sqrt()
    }
}

fn check_alpha_bar(alpha_bar: f64) -> Result<()> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::OutOfDomain(format!("alpha_bar = {alpha_bar} outside (0, 1)")));
    }
    Ok(())
}

/// DDPM update with explicit α_t, ᾱ_t and σ_t.
pub fn ddpm_update(x: f64, eps: f64, alpha: f64, alpha_bar: f64, sigma: f64, z: f64) -> f64 {
    (x - (1.0 - alpha) / (1.0 - alpha_bar).sqrt() * eps) / alpha.sqrt() + sigma * z
}

/// Ancestral DDPM step from `t` to `t_prev` (`None` = clean end of chain).
///
/// `z` must be absent at the end of the chain.
pub fn ddpm_step(
    x: &SampleBatch,
    t: usize,
    t_prev: Option<usize>,
    eps: &SampleBatch,
    z: Option<&SampleBatch>,
    schedule: &NoiseSchedule,
) -> Result<SampleBatch> {
    let params = PosteriorParams::from_schedule(schedule, t, t_prev)?;
    ddpm_apply(x, eps, z, &params, t)
}

pub(crate) fn ddpm_apply(
    x: &SampleBatch,
    eps: &SampleBatch,
    z: Option<&SampleBatch>,
    p: &PosteriorParams,
    t: usize,
) -> Result<SampleBatch> {
    x.same_shape(eps)?;
    if p.alpha_bar_prev == 1.0 && z.is_some_and(|z| z.as_slice().iter().any(|v| *v != 0.0)) {
        return Err(Error::Contract("nonzero noise on the final DDPM step".into()));
    }
    if let Some(z) = z {
        x.same_shape(z)?;
    }
    let sigma = p.variance.sqrt();
    let data = x
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .enumerate()
        .map(|(i, (xv, ev))| {
            let zv = z.map_or(0.0, |z| z.as_slice()[i]);
            ddpm_update(*xv, *ev, p.alpha, p.alpha_bar, sigma, zv)
        })
        .collect();
    finish(x, data, t)
}

/// σ of a DDIM step with stochasticity `eta`; zero when the step does not move toward data.
pub fn ddim_sigma(alpha_bar: f64, alpha_bar_prev: f64, eta: f64) -> f64 {
    let v = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * (1.0 - alpha_bar / alpha_bar_prev);
    eta * v.max(0.0).sqrt()
}

/// Scalar DDIM update; returns (x̂₀, x_prev).
pub fn ddim_update(x: f64, eps: f64, alpha_bar: f64, alpha_bar_prev: f64, sigma: f64, z: f64) -> (f64, f64) {
    let x0 = (x - (1.0 - alpha_bar).sqrt() * eps) / alpha_bar.sqrt();
    let dir = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    (x0, alpha_bar_prev.sqrt() * x0 + dir * eps + sigma * z)
}

/// ∂x_prev/∂ε̂ of a DDIM step.
pub fn ddim_gain(alpha_bar: f64, alpha_bar_prev: f64, sigma: f64) -> f64 {
    (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt() - (alpha_bar_prev * (1.0 - alpha_bar) / alpha_bar).sqrt()
}

pub fn ddim_step(
    x: &SampleBatch,
    t: usize,
    t_prev: Option<usize>,
    eps: &SampleBatch,
    schedule: &NoiseSchedule,
    eta: f64,
    z: Option<&SampleBatch>,
) -> Result<SampleBatch> {
    ddim_apply(x, eps, schedule.alpha_bar(t), schedule.alpha_bar_at(t_prev), eta, z, t)
}

pub(crate) fn ddim_apply(
    x: &SampleBatch,
    eps: &SampleBatch,
    alpha_bar: f64,
    alpha_bar_prev: f64,
    eta: f64,
    z: Option<&SampleBatch>,
    t: usize,
) -> Result<SampleBatch> {
    check_alpha_bar(alpha_bar)?;
    x.same_shape(eps)?;
    if let Some(z) = z {
        x.same_shape(z)?;
    }
    let sigma = ddim_sigma(alpha_bar, alpha_bar_prev, eta);
    let data = x
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .enumerate()
        .map(|(i, (xv, ev))| {
            let zv = z.map_or(0.0, |z| z.as_slice()[i]);
            ddim_update(*xv, *ev, alpha_bar, alpha_bar_prev, sigma, zv).1
        })
        .collect();
    finish(x, data, t)
}

pub(crate) fn finish(like: &SampleBatch, data: Vec<f64>, t: usize) -> Result<SampleBatch> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::DivergedSample { timestep: t });
    }
    SampleBatch::new(like.n(), like.d(), data)
}
