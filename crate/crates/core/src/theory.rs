//! Numerical checks of the optimal-shift analysis.
//!
//! Covers the KL objective between a predicted state and the forward marginals,
//! the closed-form optimal shift variance, brute-force oracles over a window,
//! and the window-size bounds.

use crate::denoisers::GaussianMoments;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng, Streams};
use crate::schedule::NoiseSchedule;
use crate::timeshift::{intra_sample_variance, select_shifted_timestep, shift_window};
use serde::{Deserialize, Serialize};

/// Inputs of the optimal-shift variance formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoremProbe {
    /// Measured variance σ_{t−1} of the predicted state.
    pub sigma_prev: f64,
    /// ‖e‖².
    pub err_sq: f64,
    pub d: usize,
    pub t: usize,
}

/// σ_{t_s} = σ_{t−1} − ‖e‖²/(d(d−1)).
pub fn optimal_shift_variance(probe: &TheoremProbe) -> Result<f64> {
    if !(probe.sigma_prev > 0.0 && probe.sigma_prev.is_finite()) {
        return Err(Error::OutOfDomain(format!("sigma_prev = {} must be > 0", probe.sigma_prev)));
    }
    if !(probe.err_sq >= 0.0 && probe.err_sq.is_finite()) {
        return Err(Error::OutOfDomain(format!("err_sq = {} must be >= 0", probe.err_sq)));
    }
    if probe.d < 2 {
        return Err(Error::UndefinedVariance(probe.d));
    }
    let d = probe.d as f64;
    let v = probe.sigma_prev - probe.err_sq / (d * (d - 1.0));
    if v <= 0.0 {
        return Err(Error::OutOfRegime(format!(
            "optimal variance {v} <= 0 at t = {}; the error dominates the state",
            probe.t
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlForm {
    /// `½(d·log v + (d/v)·σ̂ + ‖μ̂ − √ᾱ·x₀‖²/v)` with σ̂ the per-coordinate predicted variance.
    AsWritten,
    /// `½(d·log v + Tr(Σ̂)/v + ‖μ̂ − √ᾱ·x₀‖²/v)`, the diagonal-Gaussian KL up to a constant.
    Standard,
}

/// t_s-dependent part of KL(N(μ̂, Σ̂) ‖ q(x_{t_s} | x₀)).
pub fn kl_objective(pred: &GaussianMoments, t_s: usize, x0: &[f64], schedule: &NoiseSchedule, form: KlForm) -> Result<f64> {
    schedule.check_timestep(t_s)?;
    let d = pred.dim();
    if x0.len() != d || pred.variance.len() != d {
        return Err(Error::Dimension(format!("moments of dim {d} vs x0 of dim {}", x0.len())));
    }
    if pred.variance.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::InvalidModel("predicted variance must be positive".into()));
    }
    let ab = schedule.alpha_bar(t_s);
    if !(ab > 0.0 && ab < 1.0) {
        return Err(Error::OutOfDomain(format!("alpha_bar = {ab} at t_s = {t_s}")));
    }
    let v = 1.0 - ab;
    let sa = ab.sqrt();
    let mean_term: f64 = pred.mean.iter().zip(x0).map(|(m, x)| (m - sa * x) * (m - sa * x)).sum();
    let trace: f64 = pred.variance.iter().sum();
    let df = d as f64;
    let trace_term = match form {
        KlForm::AsWritten => df / v * (trace / df),
        KlForm::Standard => trace / v,
    };
    Ok(0.5 * (df * v.ln() + trace_term + mean_term / v))
}

/// What the brute-force oracle knows about one predicted state.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleInput {
    /// Clean sample the chain is heading to.
    pub x0: Vec<f64>,
    /// Predicted mean of x̂_{t−1}.
    pub mean: Vec<f64>,
    /// Per-coordinate predicted variance σ̂.
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OracleMode {
    /// Minimize the standard KL objective.
    Kl,
    /// Minimize E‖x̂ − x_τ‖ with both states driven by the same noise draw.
    Distance { samples: usize },
}

/// argmin over τ ∈ center ± w/2 of the chosen oracle criterion.
///
/// `center` is the nominal timestep of the predicted state (t−1). Ties follow
/// the same rule as the variance-matching selection.
pub fn oracle_best_timestep(
    input: &OracleInput,
    center: usize,
    window: usize,
    schedule: &NoiseSchedule,
    mode: OracleMode,
    rng: &mut StreamRng,
) -> Result<usize> {
    schedule.check_timestep(center)?;
    let d = input.x0.len();
    if input.mean.len() != d {
        return Err(Error::Dimension("oracle mean and x0 differ in dimension".into()));
    }
    if input.sigma_hat.is_nan() || input.sigma_hat <= 0.0 {
        return Err(Error::OutOfRegime(format!("estimated variance {} <= 0", input.sigma_hat)));
    }
    let (lo, hi) = shift_window(center, window, schedule);
    let score: Box<dyn Fn(usize) -> Result<f64>> = match mode {
        OracleMode::Kl => {
            let pred = GaussianMoments { mean: input.mean.clone(), variance: vec![input.sigma_hat; d], weight: 1.0 };
            Box::new(move |tau| kl_objective(&pred, tau, &input.x0, schedule, KlForm::Standard))
        }
        OracleMode::Distance { samples } => {
            let noise: Vec<Vec<f64>> = (0..samples.max(1))
                .map(|_| {
                    let mut z = vec![0.0; d];
                    rng::fill_normal(rng, &mut z);
                    z
                })
                .collect();
            let sh = input.sigma_hat.sqrt();
            Box::new(move |tau| {
                let ab = schedule.alpha_bar(tau);
                let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
                let mut total = 0.0;
                for z in &noise {
                    let mut sq = 0.0;
                    for j in 0..d {
                        let diff = input.mean[j] - sa * input.x0[j] + (sh - sn) * z[j];
                        sq += diff * diff;
                    }
                    total += sq.sqrt();
                }
                Ok(total / noise.len() as f64)
            })
        }
    };
    let mut best = center;
    let mut best_key = (f64::INFINITY, usize::MAX);
    for tau in lo..=hi {
        let key = (score(tau)?, tau.abs_diff(center));
        if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best = tau;
            best_key = key;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowBoundQuery {
    pub t: usize,
    pub gamma: f64,
    pub err_norm: f64,
    pub x0_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowBounds {
    pub t_min: usize,
    pub t_max: usize,
    pub w_bound: usize,
    /// The √ᾱ interval left the range covered by the schedule.
    pub clamped: bool,
}

/// Timesteps whose √ᾱ stays within `γ‖e‖/‖x₀‖` of √ᾱ_{t−1}, and the window width they allow.
///
/// `w_bound = 2·min(t_max − (t−1), (t−1) − t_min)`.
pub fn window_bounds(q: &WindowBoundQuery, schedule: &NoiseSchedule) -> Result<WindowBounds> {
    if !(q.gamma >= 0.0 && q.gamma < 1.0) {
        return Err(Error::OutOfDomain(format!("gamma = {} must lie in [0, 1)", q.gamma)));
    }
    if !(q.err_norm > 0.0 && q.x0_norm > 0.0) {
        return Err(Error::OutOfDomain("norms must be positive".into()));
    }
    if q.t == 0 || q.t > schedule.len() {
        return Err(Error::OutOfDomain(format!("t = {} needs t - 1 in [0, T - 1]", q.t)));
    }
    let c = q.t - 1;
    let roots: Vec<f64> = schedule.alpha_bars().iter().map(|a| a.sqrt()).collect();
    let s = roots[c];
    let r = q.gamma * q.err_norm / q.x0_norm;
    // roots is strictly decreasing.
    let t_min = roots.partition_point(|v| *v > s + r);
    let t_max = roots.partition_point(|v| *v >= s - r) - 1;
    let clamped = s + r > roots[0] || s - r < roots[roots.len() - 1];
    let w_bound = 2 * (t_max - c).min(c - t_min);
    Ok(WindowBounds { t_min, t_max, w_bound, clamped })
}

/// Settings of the selection-agreement experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheoremExperiment {
    pub d: usize,
    /// Iteration timesteps t; the predicted state sits at t−1.
    pub timesteps: Vec<usize>,
    pub err_norms: Vec<f64>,
    pub trials: usize,
    pub window: usize,
    /// Per-coordinate variance of the zero-mean Gaussian data.
    pub data_variance: f64,
    /// Largest |τ_alg − τ_oracle| that counts as agreement.
    pub tolerance: usize,
    pub seed: u64,
}

impl Default for TheoremExperiment {
    fn default() -> Self {
        Self {
            d: 3072,
            timesteps: vec![700, 800, 900],
            err_norms: vec![0.5, 5.0, 50.0],
            trials: 1000,
            window: 40,
            data_variance: 1.0,
            tolerance: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCell {
    pub t: usize,
    pub err_norm: f64,
    pub trials: usize,
    pub agreement_rate: f64,
    /// Mean |1−ᾱ_{τ_oracle} − optimal_shift_variance| over trials.
    pub mean_variance_gap: f64,
    /// Spacing of 1−ᾱ across the window, per step.
    pub variance_resolution: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub experiment: TheoremExperiment,
    pub cells: Vec<TheoremCell>,
    pub agreement_rate: f64,
    pub min_cell_rate: f64,
}

/// One trial: a state `√ᾱ_{t−1}x₀ + e + √(1−ᾱ_{t−1})z`, the variance-matching pick and the KL-oracle pick.
///
/// The oracle estimates σ̂ from the measured variance as `σ_{t−1} − ‖e‖²/(d−1)`.
pub fn theorem_trial(
    t: usize,
    err_norm: f64,
    cfg: &TheoremExperiment,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<(usize, usize, f64)> {
    let d = cfg.d;
    let c = t - 1;
    let ab = schedule.alpha_bar(c);
    let mut x0 = vec![0.0; d];
    rng::fill_normal(rng, &mut x0);
    x0.iter_mut().for_each(|v| *v *= cfg.data_variance.sqrt());
    let mut dir = vec![0.0; d];
    rng::fill_normal(rng, &mut dir);
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let e: Vec<f64> = dir.iter().map(|v| err_norm * v / norm).collect();
    let mut z = vec![0.0; d];
    rng::fill_normal(rng, &mut z);
    let mean: Vec<f64> = x0.iter().zip(&e).map(|(x, ev)| ab.sqrt() * x + ev).collect();
    let state: Vec<f64> = mean.iter().zip(&z).map(|(m, zv)| m + (1.0 - ab).sqrt() * zv).collect();

    let measured = intra_sample_variance(&state)?;
    let picked = select_shifted_timestep(measured, c, cfg.window, schedule)?;
    let err_sq = err_norm * err_norm;
    let sigma_hat = measured - err_sq / (d as f64 - 1.0);
    let input = OracleInput { x0, mean, sigma_hat };
    let oracle = oracle_best_timestep(&input, c, cfg.window, schedule, OracleMode::Kl, rng)?;
    let target = optimal_shift_variance(&TheoremProbe { sigma_prev: measured, err_sq, d, t })?;
    Ok((picked, oracle, (schedule.variance(oracle) - target).abs()))
}

pub fn run_theorem_experiment(cfg: &TheoremExperiment, schedule: &NoiseSchedule) -> Result<TheoremReport> {
    if cfg.d < 2 || cfg.trials == 0 {
        return Err(Error::Config("theorem experiment needs d >= 2 and trials >= 1".into()));
    }
    let streams = Streams::new(cfg.seed);
    let mut cells = Vec::new();
    for (ti, &t) in cfg.timesteps.iter().enumerate() {
        if t == 0 || t > schedule.len() {
            return Err(Error::Config(format!("timestep {t} outside [1, T]")));
        }
        for (ei, &err_norm) in cfg.err_norms.iter().enumerate() {
            let mut rng = streams.stream(Purpose::Diagnostics, (ti * cfg.err_norms.len() + ei) as u64);
            let mut agree = 0usize;
            let mut gap = 0.0;
            for _ in 0..cfg.trials {
                let (picked, oracle, g) = theorem_trial(t, err_norm, cfg, schedule, &mut rng)?;
                if picked.abs_diff(oracle) <= cfg.tolerance {
                    agree += 1;
                }
                gap += g;
            }
            let (lo, hi) = shift_window(t - 1, cfg.window, schedule);
            let resolution = (schedule.variance(hi) - schedule.variance(lo)) / (hi - lo).max(1) as f64;
            cells.push(TheoremCell {
                t,
                err_norm,
                trials: cfg.trials,
                agreement_rate: agree as f64 / cfg.trials as f64,
                mean_variance_gap: gap / cfg.trials as f64,
                variance_resolution: resolution,
            });
        }
    }
    let agreement_rate = cells.iter().map(|c| c.agreement_rate).sum::<f64>() / cells.len().max(1) as f64;
    let min_cell_rate = cells.iter().map(|c| c.agreement_rate).fold(1.0, f64::min);
    Ok(TheoremReport { experiment: cfg.clone(), cells, agreement_rate, min_cell_rate })
}
