//! Diffusion-time discretization: the β/α/ᾱ ladder, sampling grids and the
//! forward corruption kernel.
//!
//! Timesteps are zero-based: `t = 0` is the least noisy level and `t = T - 1`
//! the noisiest. The backward chain ends one step past `t = 0`, at the clean
//! data level where ᾱ = 1; APIs model that position as `None`.

use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::io::fmt17;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    variances: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced β from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be >= 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            (0..steps)
                .map(|i| beta_start + span * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(ScheduleKind::Linear, betas)
    }

    pub fn build(kind: ScheduleKind, steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps, beta_start, beta_end),
        }
    }

    fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars: Vec<f64> = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        if let Some(t) = alpha_bars.iter().position(|&a| a <= 0.0) {
            return Err(Error::InvalidSchedule(format!("alpha_bar underflows to 0 at t = {t}")));
        }
        let variances = alpha_bars.iter().map(|a| 1.0 - a).collect();
        Ok(Self { kind, betas, alphas, alpha_bars, variances })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of training timesteps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// σ²_t = 1 − ᾱ_t.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// ᾱ at a chain position; `None` is the clean end of the chain (ᾱ = 1).
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    pub fn variance(&self, t: usize) -> f64 {
        self.variances[t]
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::OutOfDomain(format!("timestep {t} outside [0, {}]", self.len() - 1)));
        }
        Ok(())
    }

    /// Short stable hash of the ladder, written into checkpoints.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"linear");
        h.update((self.len() as u64).to_le_bytes());
        for b in &self.betas {
            h.update(b.to_bits().to_le_bytes());
        }
        let digest = h.finalize();
        digest[..8].iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// CSV `t,beta,alpha,alpha_bar,variance` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,beta,alpha,alpha_bar,variance\n");
        for t in 0..self.len() {
            let _ = writeln!(
                out,
                "{t},{},{},{},{}",
                fmt17(self.betas[t]),
                fmt17(self.alphas[t]),
                fmt17(self.alpha_bars[t]),
                fmt17(self.variances[t])
            );
        }
        out
    }

    /// Largest `t` with ᾱ_t ≥ `alpha_bar`, by binary search over the ladder.
    /// `None` when even ᾱ_0 is below the target.
    pub fn last_at_or_above(&self, alpha_bar: f64) -> Option<usize> {
        let k = self.alpha_bars.partition_point(|&a| a >= alpha_bar);
        k.checked_sub(1)
    }

    /// Smallest `t` with ᾱ_t ≤ `alpha_bar`. `None` when even ᾱ_{T-1} is above it.
    pub fn first_at_or_below(&self, alpha_bar: f64) -> Option<usize> {
        let k = self.alpha_bars.partition_point(|&a| a > alpha_bar);
        (k < self.len()).then_some(k)
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Uniform,
    Quadratic,
}

impl std::str::FromStr for GridMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(GridMode::Uniform),
            "quadratic" => Ok(GridMode::Quadratic),
            other => Err(Error::Config(format!("unknown grid mode '{other}'"))),
        }
    }
}

/// Subsampled timesteps used by a sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    steps: Vec<usize>,
    mode: GridMode,
    c: f64,
}

impl TimeGrid {
    /// Explicit grid; steps must be strictly increasing and inside `[0, T-1]`.
    pub fn from_steps(steps: Vec<usize>, schedule: &NoiseSchedule) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::InvalidGrid("empty grid".into()));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidGrid("steps must be strictly increasing".into()));
        }
        if *steps.last().unwrap() >= schedule.len() {
            return Err(Error::InvalidGrid("step beyond T - 1".into()));
        }
        Ok(Self { steps, mode: GridMode::Uniform, c: f64::NAN })
    }

    /// Ascending timesteps.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn mode(&self) -> GridMode {
        self.mode
    }

    pub fn constant(&self) -> f64 {
        self.c
    }

    /// Sampling order, noisiest first.
    pub fn descending(&self) -> Vec<usize> {
        self.steps.iter().rev().copied().collect()
    }

    /// `(t, t_prev)` transfer pairs in sampling order; the final pair ends the chain.
    pub fn transitions(&self) -> Vec<(usize, Option<usize>)> {
        let desc = self.descending();
        desc.iter()
            .enumerate()
            .map(|(i, &t)| (t, desc.get(i + 1).copied()))
            .collect()
    }

    pub fn min(&self) -> usize {
        self.steps[0]
    }

    pub fn max(&self) -> usize {
        *self.steps.last().unwrap()
    }
}

/// `n` timesteps `⌊c·i⌋` (uniform) or `⌊c·i²⌋` (quadratic).
///
/// Uniform uses `c = T/n`; quadratic uses `c = (T-1)/(n-1)²` so the grid spans
/// `[0, T-1]`. Floors are taken in integer arithmetic.
pub fn select_time_grid(schedule: &NoiseSchedule, n: usize, mode: GridMode) -> Result<TimeGrid> {
    let big_t = schedule.len();
    if n == 0 || n > big_t {
        return Err(Error::InvalidGrid(format!("need 1 <= n <= T = {big_t}, got n = {n}")));
    }
    let (steps, c): (Vec<usize>, f64) = match mode {
        GridMode::Uniform => {
            let steps = (0..n).map(|i| ((big_t * i) / n).min(big_t - 1)).collect();
            (steps, big_t as f64 / n as f64)
        }
        GridMode::Quadratic if n == 1 => (vec![0], 0.0),
        GridMode::Quadratic => {
            let denom = (n - 1) * (n - 1);
            let steps = (0..n).map(|i| ((big_t - 1) * i * i) / denom).collect();
            (steps, (big_t - 1) as f64 / denom as f64)
        }
    };
    if steps.windows(2).any(|w: &[usize]| w[0] >= w[1]) {
        return Err(Error::InvalidGrid(format!(
            "{mode:?} grid with n = {n} over T = {big_t} has repeated timesteps"
        )));
    }
    Ok(TimeGrid { steps, mode, c })
}

/// Forward corruption `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn q_sample(x0: &SampleBatch, t: usize, eps: &SampleBatch, schedule: &NoiseSchedule) -> Result<SampleBatch> {
    x0.same_shape(eps)?;
    schedule.check_timestep(t)?;
    let a = schedule.alpha_bar(t);
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let data = x0
        .as_slice()
        .iter()
        .zip(eps.as_slice())
        .map(|(x, e)| sa * x + sn * e)
        .collect();
    SampleBatch::new(x0.n(), x0.d(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.betas(), &[0.5]);
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn default_schedule_terminal_alpha_bar() {
        // Direct product of (1 - beta) over the ladder, evaluated independently.
        let s = NoiseSchedule::default();
        assert!((s.alpha_bar(999) - 4.035829765375676e-05).abs() < 1e-15);
        assert!((s.alpha_bar(999) - 4.04e-5).abs() < 1e-7);
    }

    #[test]
    fn constant_beta_is_a_power() {
        let s = NoiseSchedule::linear(10, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(9) - 0.9f64.powi(10)).abs() < 1e-15);
        assert!((s.alpha_bar(9) - 0.348678).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
    }

    #[test]
    fn ladder_identities_hold_exhaustively() {
        let s = NoiseSchedule::default();
        assert_eq!(s.alpha_bar(0), s.alphas()[0]);
        for t in 0..s.len() {
            assert!(s.betas()[t] > 0.0 && s.betas()[t] < 1.0);
            assert_eq!(s.alphas()[t], 1.0 - s.betas()[t]);
            assert_eq!(s.variances()[t] + s.alpha_bars()[t], 1.0);
            assert!(s.alpha_bar(t) > 0.0 && s.alpha_bar(t) < 1.0);
            if t >= 1 {
                assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alphas()[t]);
                assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            }
        }
    }

    #[test]
    fn uniform_and_quadratic_grids() {
        let s = NoiseSchedule::default();
        let u = select_time_grid(&s, 10, GridMode::Uniform).unwrap();
        assert_eq!(u.steps(), &[0, 100, 200, 300, 400, 500, 600, 700, 800, 900]);
        assert_eq!(u.constant(), 100.0);
        let q = select_time_grid(&s, 10, GridMode::Quadratic).unwrap();
        assert_eq!(q.steps(), &[0, 12, 49, 111, 197, 308, 444, 604, 789, 999]);
        assert_eq!(q.descending()[0], 999);
        for mode in [GridMode::Uniform, GridMode::Quadratic] {
            assert_eq!(select_time_grid(&s, 1, mode).unwrap().steps(), &[0]);
            assert_eq!(select_time_grid(&NoiseSchedule::linear(7, 0.1, 0.2).unwrap(), 1, mode).unwrap().steps(), &[0]);
        }
    }

    #[test]
    fn full_grid_is_every_timestep() {
        let s = NoiseSchedule::linear(50, 1e-3, 0.05).unwrap();
        let g = select_time_grid(&s, 50, GridMode::Uniform).unwrap();
        assert_eq!(g.steps(), (0..50).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn grid_errors() {
        let s = NoiseSchedule::linear(20, 1e-3, 0.05).unwrap();
        assert!(matches!(select_time_grid(&s, 0, GridMode::Uniform), Err(Error::InvalidGrid(_))));
        assert!(matches!(select_time_grid(&s, 21, GridMode::Uniform), Err(Error::InvalidGrid(_))));
        // c = 19/81 < 1 makes the first quadratic steps collide.
        assert!(matches!(select_time_grid(&s, 10, GridMode::Quadratic), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn transitions_end_the_chain() {
        let s = NoiseSchedule::default();
        let g = select_time_grid(&s, 3, GridMode::Uniform).unwrap();
        assert_eq!(g.transitions(), vec![(666, Some(333)), (333, Some(0)), (0, None)]);
    }

    #[test]
    fn q_sample_examples() {
        let s = NoiseSchedule::default();
        let x0 = SampleBatch::new(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let zero = SampleBatch::zeros(2, 2);
        let out = q_sample(&x0, 400, &zero, &s).unwrap();
        let sa = s.alpha_bar(400).sqrt();
        for (o, x) in out.as_slice().iter().zip(x0.as_slice()) {
            assert_eq!(*o, sa * x);
        }
        // A single-step ladder with alpha_bar = 0.25.
        let quarter = NoiseSchedule::linear(1, 0.75, 0.75).unwrap();
        let x0 = SampleBatch::new(1, 1, vec![2.0]).unwrap();
        let eps = SampleBatch::new(1, 1, vec![1.0]).unwrap();
        let out = q_sample(&x0, 0, &eps, &quarter).unwrap();
        assert!((out.as_slice()[0] - 1.8660254037844386).abs() < 1e-12);
        assert!(q_sample(&x0, 0, &SampleBatch::zeros(1, 2), &quarter).is_err());
    }

    #[test]
    fn q_sample_preserves_unit_variance() {
        let s = NoiseSchedule::default();
        let streams = Streams::new(11);
        let n = 20_000;
        let x0 = SampleBatch::standard_normal(n, 1, &mut streams.stream(Purpose::Data, 0));
        let eps = SampleBatch::standard_normal(n, 1, &mut streams.stream(Purpose::Data, 1));
        let xt = q_sample(&x0, 500, &eps, &s).unwrap();
        let mean = xt.as_slice().iter().sum::<f64>() / n as f64;
        let var = xt.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn ladder_inversion() {
        let s = NoiseSchedule::default();
        let target = s.alpha_bar(300);
        assert_eq!(s.last_at_or_above(target), Some(300));
        assert_eq!(s.first_at_or_below(target), Some(300));
        assert_eq!(s.last_at_or_above(2.0), None);
        assert_eq!(s.first_at_or_below(0.0), None);
        assert_eq!(s.last_at_or_above(0.0), Some(999));
    }
}
