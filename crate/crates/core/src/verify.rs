//! Self-checks shared by the `verify` command and the acceptance suite.

use crate::batch::SampleBatch;
use crate::denoisers::{perturb_epsilon, AnalyticDenoiser, GaussianMoments, Mixture, PerturbationSpec};
use crate::error::Result;
use crate::rng::{Purpose, Streams};
use crate::samplers::{run_sampler, run_sampler_from, Method, SamplerConfig, StepRecord};
use crate::schedule::{select_time_grid, GridMode, NoiseSchedule, TimeGrid};
use crate::theory::{window_bounds, WindowBoundQuery};
use crate::timeshift::{run_time_shift_sampler, ShiftConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceCase {
    pub method: Method,
    pub seed: u64,
    /// "window=0" or "cutoff>=T".
    pub variant: String,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub chains: usize,
    pub steps: usize,
    pub cases: Vec<EquivalenceCase>,
    pub pass: bool,
}

/// Time-shift runs that cannot shift must reproduce the baseline bit for bit.
pub fn equivalence(chains: usize, seeds: &[u64], schedule: &NoiseSchedule) -> Result<EquivalenceReport> {
    let d = 8;
    let mix = Mixture::single(GaussianMoments::isotropic(vec![0.25; d], 0.5))?;
    let model = perturb_epsilon(AnalyticDenoiser::new(mix, schedule.clone()), PerturbationSpec::constant(schedule.len(), 0.05, 11))?;
    let steps = 10;
    let grid = select_time_grid(schedule, steps, GridMode::Uniform)?;
    let mut cases = Vec::new();
    for method in Method::ALL {
        for &seed in seeds {
            let mut cfg = SamplerConfig::new(method, grid.clone(), chains, seed);
            if method == Method::Ddim {
                cfg.eta = 0.5;
            }
            let (base, _) = run_sampler(&cfg, &model, schedule)?;
            for (variant, shift) in [
                ("window=0", ShiftConfig::new(0, 300)),
                ("cutoff>=T", ShiftConfig::new(40, schedule.len())),
            ] {
                let (out, _) = run_time_shift_sampler(&cfg, &shift, &model, schedule)?;
                let identical = bits(&out) == bits(&base);
                cases.push(EquivalenceCase { method, seed, variant: variant.into(), identical });
            }
        }
    }
    let pass = cases.iter().all(|c| c.identical);
    Ok(EquivalenceReport { chains, steps, cases, pass })
}

fn bits(x: &SampleBatch) -> Vec<u64> {
    x.as_slice().iter().map(|v| v.to_bits()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderCurve {
    pub method: Method,
    pub errors: Vec<f64>,
    /// Least-squares slope of log(error) against log(steps).
    pub slope: f64,
    pub threshold: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderReport {
    pub steps: Vec<usize>,
    pub start: usize,
    pub curves: Vec<OrderCurve>,
    pub pass: bool,
}

/// Least-squares slope of `ys` against `xs`.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Endpoint error of the deterministic samplers on the probability flow of Gaussian data.
///
/// Every grid is uniform from `start` down to 0, so all runs integrate the same
/// path; the reference is the exact linear flow map
/// `x_s = √ᾱ_s·m + √(S_s/S_t)·(x_t − √ᾱ_t·m)` with `S_t = ᾱ_t·v + 1 − ᾱ_t`.
pub fn solver_order(steps: &[usize], start: usize, schedule: &NoiseSchedule) -> Result<OrderReport> {
    let d = 4;
    let (m, v) = (0.3, 0.1);
    let model = AnalyticDenoiser::new(Mixture::single(GaussianMoments::isotropic(vec![m; d], v))?, schedule.clone());
    let chains = 16;
    let x = SampleBatch::standard_normal(chains, d, &mut Streams::new(3).stream(Purpose::Sampling, 0));
    let big_s = |t: usize| schedule.alpha_bar(t) * v + 1.0 - schedule.alpha_bar(t);
    let (a0, a1) = (schedule.alpha_bar(0), schedule.alpha_bar(start));
    let exact: Vec<f64> = x
        .as_slice()
        .iter()
        .map(|xi| a0.sqrt() * m + (big_s(0) / big_s(start)).sqrt() * (xi - a1.sqrt() * m))
        .collect();

    let mut curves = Vec::new();
    for method in [Method::Ddim, Method::SPndm, Method::FPndm] {
        let mut errors = Vec::new();
        for &n in steps {
            let grid = TimeGrid::from_steps((0..=n).map(|i| i * start / n).collect(), schedule)?;
            let cfg = SamplerConfig::new(method, grid, chains, 0);
            let mut end = None;
            let mut observe = |r: &StepRecord, x: &SampleBatch| {
                if r.t_prev == Some(0) {
                    end = Some(x.clone());
                }
            };
            run_sampler_from(&cfg, &model, schedule, x.clone(), start, Some(&mut observe))?;
            let end = end.expect("grid ends at 0");
            let sq: f64 = end.as_slice().iter().zip(&exact).map(|(a, b)| (a - b) * (a - b)).sum();
            errors.push((sq / exact.len() as f64).sqrt());
        }
        let xs: Vec<f64> = steps.iter().map(|s| (*s as f64).ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let slope = fit_slope(&xs, &ys);
        let threshold = match method {
            Method::SPndm => Some(-1.7),
            Method::FPndm => Some(-3.0),
            _ => None,
        };
        let pass = threshold.is_none_or(|th| slope <= th);
        curves.push(OrderCurve { method, errors, slope, threshold, pass });
    }
    let pass = curves.iter().all(|c| c.pass);
    Ok(OrderReport { steps: steps.to_vec(), start, curves, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowReport {
    pub checks: Vec<WindowCheck>,
    pub pass: bool,
}

/// Sanity of the window-size bound over a grid of timesteps, γ and ‖x₀‖.
pub fn window_sanity(schedule: &NoiseSchedule) -> Result<WindowReport> {
    let ts = [300, 500, 701, 800, 901];
    let gammas = [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.5];
    let norms = [5.0, 10.0, 20.0, 55.4, 100.0];
    let err_norm = 2.0;
    let q = |t, gamma, x0_norm| WindowBoundQuery { t, gamma, err_norm, x0_norm };
    let mut checks = Vec::new();

    let mut bad = Vec::new();
    for &t in &ts {
        let b = window_bounds(&q(t, 1e-12, 55.4), schedule)?;
        if b.w_bound != 0 || b.t_min != t - 1 || b.t_max != t - 1 {
            bad.push(format!("t={t}: {b:?}"));
        }
    }
    checks.push(WindowCheck { name: "zero at vanishing gamma".into(), pass: bad.is_empty(), detail: bad.join("; ") });

    let mut bad = Vec::new();
    for &t in &ts {
        for &norm in &norms {
            let ws: Vec<usize> = gammas.iter().map(|g| window_bounds(&q(t, *g, norm), schedule).map(|b| b.w_bound)).collect::<Result<_>>()?;
            if ws.windows(2).any(|w| w[1] < w[0]) {
                bad.push(format!("t={t} |x0|={norm}: {ws:?}"));
            }
        }
    }
    checks.push(WindowCheck { name: "non-decreasing in gamma".into(), pass: bad.is_empty(), detail: bad.join("; ") });

    let mut bad = Vec::new();
    for &t in &ts {
        for &g in &gammas {
            let ws: Vec<usize> = norms.iter().map(|n| window_bounds(&q(t, g, *n), schedule).map(|b| b.w_bound)).collect::<Result<_>>()?;
            if ws.windows(2).any(|w| w[1] > w[0]) {
                bad.push(format!("t={t} gamma={g}: {ws:?}"));
            }
        }
    }
    checks.push(WindowCheck { name: "non-increasing in |x0|".into(), pass: bad.is_empty(), detail: bad.join("; ") });

    let roots: Vec<f64> = schedule.alpha_bars().iter().map(|a| a.sqrt()).collect();
    let last = roots.len() - 1;
    let mut bad = Vec::new();
    for &t in &ts {
        for &g in &gammas {
            for &norm in &norms {
                let b = window_bounds(&q(t, g, norm), schedule)?;
                let (s, r) = (roots[t - 1], g * err_norm / norm);
                let lo_ok = roots[b.t_min] <= s + r && (b.t_min == 0 || roots[b.t_min - 1] > s + r);
                let hi_ok = roots[b.t_max] >= s - r && (b.t_max == last || roots[b.t_max + 1] < s - r);
                let order_ok = b.t_min < t && t <= b.t_max + 1 && b.w_bound.is_multiple_of(2);
                if !(lo_ok && hi_ok && order_ok) {
                    bad.push(format!("t={t} gamma={g} |x0|={norm}: {b:?}"));
                }
            }
        }
    }
    checks.push(WindowCheck { name: "endpoints invert the ladder".into(), pass: bad.is_empty(), detail: bad.join("; ") });

    let pass = checks.iter().all(|c| c.pass);
    Ok(WindowReport { checks, pass })
}
