//! Per-sample variance distributions along the chain.

use super::{quantile, DiagnosticsTable};
use crate::batch::SampleBatch;
use crate::denoisers::EpsilonModel;
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::rng::{self, StreamRng};
use crate::samplers::{run_sampler_observed, SamplerConfig, StepRecord};
use crate::schedule::{q_sample, NoiseSchedule};
use crate::timeshift::intra_sample_variance;
use serde::{Deserialize, Serialize};

pub const QUANTILES: [f64; 7] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0];
const BINS: usize = 20;

/// Where the states come from.
pub enum VarianceSource<'a> {
    /// `q(x_t | x₀)` on the dataset.
    Forward,
    /// States produced by a backward sampler; each requested `t` must be a transfer target of the grid.
    Backward { model: &'a dyn EpsilonModel, config: SamplerConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceAtStep {
    pub t: usize,
    /// `(q, value)` pairs at [`QUANTILES`].
    pub quantiles: Vec<(f64, f64)>,
    /// `(lo, hi, count)` bins spanning the observed range.
    pub histogram: Vec<(f64, f64, usize)>,
    /// q90 − q10.
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceDensity {
    pub steps: Vec<VarianceAtStep>,
}

impl VarianceDensity {
    pub fn width(&self, t: usize) -> Option<f64> {
        self.steps.iter().find(|s| s.t == t).map(|s| s.width)
    }

    /// `t,quantile,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,quantile,value\n");
        for s in &self.steps {
            for (q, v) in &s.quantiles {
                out.push_str(&format!("{},{},{}\n", s.t, fmt17(*q), fmt17(*v)));
            }
        }
        out
    }

    pub fn histogram_csv(&self) -> String {
        let mut out = String::from("t,lo,hi,count\n");
        for s in &self.steps {
            for (lo, hi, c) in &s.histogram {
                out.push_str(&format!("{},{},{},{c}\n", s.t, fmt17(*lo), fmt17(*hi)));
            }
        }
        out
    }

    pub fn table(&self) -> DiagnosticsTable {
        let mut table = DiagnosticsTable::new();
        for s in &self.steps {
            for (q, v) in &s.quantiles {
                table.push("variance", Some(s.t), format!("q{}", fmt17(*q)), *v);
            }
            table.push("variance", Some(s.t), "width", s.width);
        }
        table
    }
}

fn summarize(t: usize, mut vars: Vec<f64>) -> VarianceAtStep {
    vars.sort_by(f64::total_cmp);
    let quantiles: Vec<(f64, f64)> = QUANTILES.iter().map(|q| (*q, quantile(&vars, *q))).collect();
    let (lo, hi) = (vars[0], vars[vars.len() - 1]);
    let span = (hi - lo).max(f64::MIN_POSITIVE);
    let mut counts = [0usize; BINS];
    for v in &vars {
        let k = (((v - lo) / span) * BINS as f64).floor() as usize;
        counts[k.min(BINS - 1)] += 1;
    }
    let histogram = counts
        .iter()
        .enumerate()
        .map(|(k, c)| (lo + span * k as f64 / BINS as f64, lo + span * (k + 1) as f64 / BINS as f64, *c))
        .collect();
    VarianceAtStep { t, width: quantile(&vars, 0.9) - quantile(&vars, 0.1), quantiles, histogram }
}

fn row_variances(x: &SampleBatch) -> Result<Vec<f64>> {
    x.rows().map(intra_sample_variance).collect()
}

/// Distribution of intra-sample variances at each requested timestep.
pub fn variance_density(
    data: &SampleBatch,
    timesteps: &[usize],
    source: VarianceSource<'_>,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<VarianceDensity> {
    if data.n() < 100 {
        return Err(Error::Config(format!("variance density needs N >= 100, got {}", data.n())));
    }
    let mut steps = Vec::with_capacity(timesteps.len());
    match source {
        VarianceSource::Forward => {
            for &t in timesteps {
                let mut eps = vec![0.0; data.n() * data.d()];
                rng::fill_normal(rng, &mut eps);
                let xt = q_sample(data, t, &SampleBatch::new(data.n(), data.d(), eps)?, schedule)?;
                steps.push(summarize(t, row_variances(&xt)?));
            }
        }
        VarianceSource::Backward { model, config } => {
            let mut config = config;
            config.n = data.n();
            let mut seen: Vec<(usize, Vec<f64>)> = Vec::new();
            let mut failure = None;
            let mut observe = |r: &StepRecord, x: &SampleBatch| {
                if let Some(tp) = r.t_prev.filter(|tp| timesteps.contains(tp)) {
                    match row_variances(x) {
                        Ok(v) => seen.push((tp, v)),
                        Err(e) => failure = Some(e),
                    }
                }
            };
            run_sampler_observed(&config, model, schedule, &mut observe)?;
            if let Some(e) = failure {
                return Err(e);
            }
            for &t in timesteps {
                let (_, v) = seen
                    .iter()
                    .find(|(tp, _)| *tp == t)
                    .ok_or_else(|| Error::InvalidGrid(format!("timestep {t} is not reached by the sampler grid")))?;
                steps.push(summarize(t, v.clone()));
            }
        }
    }
    Ok(VarianceDensity { steps })
}

/// Zero-mean samples whose own variances are spread uniformly over `[lo, hi]`.
pub fn heterogeneous_data(n: usize, d: usize, lo: f64, hi: f64, rng: &mut StreamRng) -> Result<SampleBatch> {
    use rand::Rng;
    let mut data = vec![0.0; n * d];
    for row in data.chunks_mut(d) {
        let v: f64 = rng.random_range(lo..=hi);
        rng::fill_normal(rng, row);
        row.iter_mut().for_each(|x| *x *= v.sqrt());
    }
    SampleBatch::new(n, d, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    #[test]
    fn forward_density_narrows_toward_noise() {
        let s = NoiseSchedule::default();
        let mut rng = Streams::new(5).stream(Purpose::Diagnostics, 0);
        let data = heterogeneous_data(400, 3072, 0.1, 0.8, &mut rng).unwrap();
        let dens = variance_density(&data, &[0, 900], VarianceSource::Forward, &s, &mut rng).unwrap();
        let (w0, w9) = (dens.width(0).unwrap(), dens.width(900).unwrap());
        assert!((w0 - 0.8 * 0.7).abs() < 0.08, "{w0}");
        assert!(w9 < 0.5 * w0);
        let at900 = &dens.steps[1];
        assert!(at900.quantiles[0].1 >= 0.9 && at900.quantiles[6].1 <= 1.1);
        assert_eq!(at900.histogram.iter().map(|h| h.2).sum::<usize>(), 400);
    }

    #[test]
    fn small_sample_rejected() {
        let s = NoiseSchedule::default();
        let mut rng = Streams::new(5).stream(Purpose::Diagnostics, 0);
        let data = SampleBatch::zeros(10, 4);
        assert!(variance_density(&data, &[0], VarianceSource::Forward, &s, &mut rng).is_err());
    }
}
