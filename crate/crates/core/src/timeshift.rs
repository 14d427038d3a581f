//! Variance-matched timestep selection and the time-shift sampling loop.
//!
//! After every backward step the intra-sample variance of the new state is
//! compared with the schedule variances `1 − ᾱ_τ` of the timesteps in a window
//! around the state's nominal timestep; the best match is the timestep the
//! model sees next.

use crate::batch::SampleBatch;
use crate::denoisers::EpsilonModel;
use crate::error::{Error, Result};
use crate::samplers::{self, Decision, Observer, SamplerConfig, Trajectory};
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

/// Unbiased variance of one flattened sample.
pub fn intra_sample_variance(x: &[f64]) -> Result<f64> {
    let d = x.len();
    if d < 2 {
        return Err(Error::UndefinedVariance(d));
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    Ok(x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (d - 1) as f64)
}

/// Mean over rows of the intra-sample variance.
pub fn batch_variance(x: &SampleBatch) -> Result<f64> {
    let mut total = 0.0;
    for r in x.rows() {
        total += intra_sample_variance(r)?;
    }
    Ok(total / x.n() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Full window width w; candidates are `center ± w/2`.
    pub window: usize,
    /// No shift is selected after steps with `t <= cutoff`.
    pub cutoff: usize,
    /// Select a timestep per chain instead of one per batch.
    #[serde(default)]
    pub per_chain: bool,
}

impl ShiftConfig {
    pub fn new(window: usize, cutoff: usize) -> Self {
        Self { window, cutoff, per_chain: false }
    }

    /// Tuned defaults for common step counts: w = 40, 30, 8, 2 for 10, 20, 50, 100 steps, t_c = 300.
    pub fn preset(steps: usize) -> Option<Self> {
        let window = match steps {
            10 => 40,
            20 => 30,
            50 => 8,
            100 => 2,
            _ => return None,
        };
        Some(Self::new(window, 300))
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window {} must be even", self.window)));
        }
        if self.cutoff > schedule.len() {
            return Err(Error::Config(format!("cutoff {} exceeds T = {}", self.cutoff, schedule.len())));
        }
        Ok(())
    }
}

/// One selection made by the time-shift sampler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftEvent {
    /// Timestep of the step that produced the measured state.
    pub t: usize,
    /// Nominal timestep of the measured state; the window is centered here.
    pub center: usize,
    /// Measured intra-sample variance (absent below the cutoff).
    pub variance: Option<f64>,
    /// Clamped candidate window, inclusive.
    pub lo: usize,
    pub hi: usize,
    /// Selected timestep; `None` below the cutoff.
    pub t_s: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chain: Option<usize>,
}

/// Inclusive window `center ± w/2` clamped to `[0, T-1]`.
pub fn shift_window(center: usize, window: usize, schedule: &NoiseSchedule) -> (usize, usize) {
    let half = window / 2;
    (center.saturating_sub(half), (center + half).min(schedule.len() - 1))
}

/// The τ in `center ± w/2` whose schedule variance `1 − ᾱ_τ` is closest to `variance`.
///
/// Ties go to the τ nearest `center`, then to the smaller τ.
pub fn select_shifted_timestep(variance: f64, center: usize, window: usize, schedule: &NoiseSchedule) -> Result<usize> {
    if !variance.is_finite() {
        return Err(Error::Contract(format!("non-finite variance {variance}")));
    }
    schedule.check_timestep(center)?;
    let (lo, hi) = shift_window(center, window, schedule);
    Ok(closest(lo, hi, center, |tau| (variance - schedule.variance(tau)).abs()))
}

fn closest(lo: usize, hi: usize, center: usize, dist: impl Fn(usize) -> f64) -> usize {
    let mut best = center;
    let mut best_key = (f64::INFINITY, usize::MAX);
    for tau in lo..=hi {
        let key = (dist(tau), tau.abs_diff(center));
        if key.0 < best_key.0 || (key.0 == best_key.0 && key.1 < best_key.1) {
            best = tau;
            best_key = key;
        }
    }
    best
}

fn decide(
    shift: &ShiftConfig,
    schedule: &NoiseSchedule,
    t: usize,
    t_prev: Option<usize>,
    x: &SampleBatch,
) -> Result<Decision> {
    let Some(center) = t_prev else {
        return Ok(Decision { next: Vec::new(), events: Vec::new() });
    };
    let (lo, hi) = shift_window(center, shift.window, schedule);
    let idle = |chain| ShiftEvent { t, center, variance: None, lo, hi, t_s: None, chain };
    if t <= shift.cutoff {
        let events = if shift.per_chain { (0..x.n()).map(|i| idle(Some(i))).collect() } else { vec![idle(None)] };
        return Ok(Decision { next: Vec::new(), events });
    }
    let mut events = Vec::new();
    let next = if shift.per_chain {
        let mut next = Vec::with_capacity(x.n());
        for (i, row) in x.rows().enumerate() {
            let v = intra_sample_variance(row)?;
            let ts = select_shifted_timestep(v, center, shift.window, schedule)?;
            events.push(ShiftEvent { variance: Some(v), t_s: Some(ts), ..idle(Some(i)) });
            next.push(Some(ts));
        }
        next
    } else {
        let v = batch_variance(x)?;
        let ts = select_shifted_timestep(v, center, shift.window, schedule)?;
        events.push(ShiftEvent { variance: Some(v), t_s: Some(ts), ..idle(None) });
        vec![Some(ts); x.n()]
    };
    Ok(Decision { next, events })
}

/// Time-shift sampling around any baseline method.
pub fn run_time_shift_sampler(
    base: &SamplerConfig,
    shift: &ShiftConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
) -> Result<(SampleBatch, Trajectory)> {
    run_time_shift_observed(base, shift, model, schedule, None)
}

pub fn run_time_shift_observed(
    base: &SamplerConfig,
    shift: &ShiftConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
    observer: Option<&mut Observer<'_>>,
) -> Result<(SampleBatch, Trajectory)> {
    shift.validate(schedule)?;
    let mut policy = |_: usize, t: usize, t_prev: Option<usize>, x: &SampleBatch| decide(shift, schedule, t, t_prev, x);
    samplers::drive(base, model, schedule, None, &base.grid.transitions(), &mut policy, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    #[test]
    fn variance_examples() {
        assert_eq!(intra_sample_variance(&[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(intra_sample_variance(&[4.0; 7]).unwrap(), 0.0);
        assert!(matches!(intra_sample_variance(&[1.0]), Err(Error::UndefinedVariance(1))));
    }

    #[test]
    fn white_noise_variance_concentrates() {
        let mut r = Streams::new(3).stream(Purpose::Diagnostics, 0);
        for _ in 0..200 {
            let x = SampleBatch::standard_normal(1, 3072, &mut r);
            let v = intra_sample_variance(x.row(0)).unwrap();
            assert!((0.9..=1.1).contains(&v), "{v}");
        }
    }

    #[test]
    fn exact_match_and_degenerate_window() {
        let s = NoiseSchedule::default();
        assert_eq!(select_shifted_timestep(s.variance(612), 600, 40, &s).unwrap(), 612);
        assert_eq!(select_shifted_timestep(0.123, 600, 0, &s).unwrap(), 600);
        assert_eq!(select_shifted_timestep(2.0, 998, 10, &s).unwrap(), 999);
        assert_eq!(select_shifted_timestep(-1.0, 2, 10, &s).unwrap(), 0);
    }

    #[test]
    fn ties_prefer_center_then_smaller() {
        assert_eq!(closest(5, 15, 10, |_| 1.0), 10);
        assert_eq!(closest(5, 15, 10, |t| (t.abs_diff(10) as f64 - 1.0).abs()), 9);
        assert_eq!(closest(5, 15, 10, |t| (t as f64 - 13.0).abs()), 13);
    }

    #[test]
    fn presets() {
        assert_eq!(ShiftConfig::preset(10).unwrap().window, 40);
        assert_eq!(ShiftConfig::preset(100).unwrap().window, 2);
        assert!(ShiftConfig::preset(7).is_none());
        assert!(ShiftConfig::new(3, 0).validate(&NoiseSchedule::default()).is_err());
    }
}
