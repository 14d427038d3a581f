//! Input coupling `C = exp(−‖x̂ − x_τ‖)` between backward states and forward states at nearby timesteps.

use super::DiagnosticsTable;
use crate::batch::SampleBatch;
use crate::denoisers::EpsilonModel;
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::rng::{self, Purpose, Streams};
use crate::samplers::{run_sampler_from, Method, SamplerConfig, StepRecord};
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingConfig {
    /// Deterministic DDIM over the grid.
    pub sampler: SamplerConfig,
    /// Grid point where the chain starts from the forward state; defaults to the top of the grid.
    pub start: Option<usize>,
    /// Probe offsets relative to the nominal timestep of each state; 0 is the diagonal.
    pub offsets: Vec<i64>,
    /// Average distances over samples before exponentiating.
    pub batch_mean: bool,
}

impl CouplingConfig {
    pub fn new(sampler: SamplerConfig) -> Self {
        Self { sampler, start: None, offsets: (-6..=4).collect(), batch_mean: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingCell {
    /// Nominal timestep of the backward state.
    pub t: usize,
    pub offset: i64,
    pub mean_c: f64,
    pub mean_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingReport {
    pub cells: Vec<CouplingCell>,
    pub samples: usize,
}

impl CouplingReport {
    pub fn steps(&self) -> Vec<usize> {
        let mut ts: Vec<usize> = self.cells.iter().map(|c| c.t).collect();
        ts.dedup();
        ts
    }

    pub fn row(&self, t: usize) -> impl Iterator<Item = &CouplingCell> {
        self.cells.iter().filter(move |c| c.t == t)
    }

    pub fn diagonal(&self, t: usize) -> Option<&CouplingCell> {
        self.row(t).find(|c| c.offset == 0)
    }

    /// Offset with the largest mean coupling at `t`.
    pub fn best_offset(&self, t: usize) -> Option<i64> {
        self.row(t).max_by(|a, b| a.mean_c.total_cmp(&b.mean_c)).map(|c| c.offset)
    }

    /// Cells whose coupling exceeds the diagonal at the same step.
    pub fn beats_diagonal(&self) -> Vec<CouplingCell> {
        self.cells
            .iter()
            .filter(|c| self.diagonal(c.t).is_some_and(|d| c.offset != 0 && c.mean_c > d.mean_c))
            .copied()
            .collect()
    }

    /// (max − min)/max of mean couplings across offsets at `t`.
    pub fn relative_spread(&self, t: usize) -> Option<f64> {
        let cs: Vec<f64> = self.row(t).map(|c| c.mean_c).collect();
        let max = cs.iter().copied().reduce(f64::max)?;
        let min = cs.iter().copied().reduce(f64::min)?;
        Some((max - min) / max)
    }

    /// `t,offset,mean_C,mean_dist`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,offset,mean_C,mean_dist\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.t, c.offset, fmt17(c.mean_c), fmt17(c.mean_dist)));
        }
        out
    }

    pub fn table(&self) -> DiagnosticsTable {
        let mut table = DiagnosticsTable::new();
        for c in &self.cells {
            table.push("coupling", Some(c.t), format!("C[{}]", c.offset), c.mean_c);
        }
        table
    }
}

/// Runs DDIM from the forward state at `start` and scores every produced state against forward states
/// `√ᾱ_τ·x₀ + √(1−ᾱ_τ)·ε` built from the same `x₀` and `ε`.
pub fn coupling_matrix(
    model: &dyn EpsilonModel,
    data: &SampleBatch,
    cfg: &CouplingConfig,
    schedule: &NoiseSchedule,
) -> Result<CouplingReport> {
    if cfg.sampler.method != Method::Ddim || cfg.sampler.eta != 0.0 {
        return Err(Error::Contract("coupling needs deterministic DDIM (eta = 0)".into()));
    }
    let mut sampler = cfg.sampler.clone();
    sampler.n = data.n();
    let start = cfg.start.unwrap_or(sampler.grid.max());
    let (n, d) = (data.n(), data.d());
    let mut rng = Streams::new(sampler.seed).stream(Purpose::Diagnostics, 0);
    let mut eps = vec![0.0; n * d];
    rng::fill_normal(&mut rng, &mut eps);
    let eps = SampleBatch::new(n, d, eps)?;
    let x_start = crate::schedule::q_sample(data, start, &eps, schedule)?;

    let mut cells = Vec::new();
    let mut observe = |r: &StepRecord, x: &SampleBatch| {
        let Some(c) = r.t_prev else { return };
        for &off in &cfg.offsets {
            let tau = c as i64 + off;
            if tau < 0 || tau >= schedule.len() as i64 {
                continue;
            }
            let ab = schedule.alpha_bar(tau as usize);
            let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
            let dists: Vec<f64> = (0..n)
                .map(|i| {
                    let (xr, x0, e) = (x.row(i), data.row(i), eps.row(i));
                    (0..d).map(|j| (xr[j] - sa * x0[j] - sn * e[j]).powi(2)).sum::<f64>().sqrt()
                })
                .collect();
            let mean_dist = dists.iter().sum::<f64>() / n as f64;
            let mean_c = if cfg.batch_mean {
                (-mean_dist).exp()
            } else {
                dists.iter().map(|v| (-v).exp()).sum::<f64>() / n as f64
            };
            cells.push(CouplingCell { t: c, offset: off, mean_c, mean_dist });
        }
    };
    run_sampler_from(&sampler, model, schedule, x_start, start, Some(&mut observe))?;
    Ok(CouplingReport { cells, samples: n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{AnalyticDenoiser, GaussianMoments, Mixture};
    use crate::schedule::{select_time_grid, GridMode};

    #[test]
    fn unbiased_chain_couples_on_the_diagonal() {
        let s = NoiseSchedule::default();
        let mean = vec![0.3, -0.2, 0.5, 0.1];
        let m = AnalyticDenoiser::new(Mixture::single(GaussianMoments::isotropic(mean.clone(), 1e-12)).unwrap(), s.clone());
        let data = SampleBatch::from_rows(&vec![mean; 64]).unwrap();
        let grid = select_time_grid(&s, 1000, GridMode::Uniform).unwrap();
        let cfg = CouplingConfig::new(SamplerConfig::new(Method::Ddim, grid, 1, 2));
        let report = coupling_matrix(&m, &data, &cfg, &s).unwrap();
        let steps = report.steps();
        assert_eq!(steps.len(), 999);
        for t in steps {
            assert_eq!(report.best_offset(t), Some(0), "t = {t}");
            for c in report.row(t) {
                assert!(c.mean_c > 0.0 && c.mean_c <= 1.0);
            }
        }
    }
}
