//! Two-stage MSE between backward states and forward ground truth.
//!
//! Stage 1 runs from `x_T` down to the split and compares each state with an
//! independent forward draw row by row, a proxy for the distance between the
//! two distribution centers. Stage 2 restarts from the forward state at the
//! split and compares each backward state with the forward state built from
//! the same `x₀` and `ε`.

use super::DiagnosticsTable;
use crate::batch::SampleBatch;
use crate::denoisers::EpsilonModel;
use crate::error::{Error, Result};
use crate::io::fmt17;
use crate::rng::{self, Purpose, Streams};
use crate::samplers::{run_sampler_from, run_sampler_observed, Method, SamplerConfig, StepRecord};
use crate::schedule::{q_sample, NoiseSchedule};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct MseConfig {
    /// Must be deterministic DDIM.
    pub sampler: SamplerConfig,
    /// Stage boundary; stage 2 starts at the largest grid point ≤ `t_split`.
    pub t_split: usize,
}

impl MseConfig {
    /// Split at 0.65·T.
    pub fn new(sampler: SamplerConfig, schedule: &NoiseSchedule) -> Self {
        Self { sampler, t_split: (schedule.len() as f64 * 0.65).round() as usize }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MsePoint {
    pub stage: u8,
    /// Nominal timestep of the state; `None` is the clean end of the chain.
    pub t: Option<usize>,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseCurve {
    pub t_split: usize,
    /// Grid point where stage 2 restarts.
    pub start: usize,
    pub points: Vec<MsePoint>,
}

impl MseCurve {
    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &MsePoint> {
        self.points.iter().filter(move |p| p.stage == stage)
    }

    pub fn terminal(&self) -> Option<f64> {
        self.stage(2).last().map(|p| p.mse)
    }

    /// Smallest stage-2 value before the terminal point.
    pub fn interior_min(&self) -> Option<f64> {
        let s2: Vec<f64> = self.stage(2).map(|p| p.mse).collect();
        s2[..s2.len().saturating_sub(1)].iter().copied().reduce(f64::min)
    }

    /// `stage,t,mse`; the clean end has an empty `t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,t,mse\n");
        for p in &self.points {
            let t = p.t.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{t},{}\n", p.stage, fmt17(p.mse)));
        }
        out
    }

    pub fn table(&self) -> DiagnosticsTable {
        let mut table = DiagnosticsTable::new();
        for p in &self.points {
            table.push("mse", p.t, format!("stage{}", p.stage), p.mse);
        }
        table
    }
}

fn mse(a: &SampleBatch, b: &SampleBatch) -> f64 {
    let s: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.as_slice().len() as f64
}

fn forward(data: &SampleBatch, t: Option<usize>, eps: &SampleBatch, schedule: &NoiseSchedule) -> Result<SampleBatch> {
    match t {
        Some(t) => q_sample(data, t, eps, schedule),
        None => Ok(data.clone()),
    }
}

pub fn mse_by_step(model: &dyn EpsilonModel, data: &SampleBatch, cfg: &MseConfig, schedule: &NoiseSchedule) -> Result<MseCurve> {
    let sampler = &cfg.sampler;
    if sampler.method != Method::Ddim || sampler.eta != 0.0 {
        return Err(Error::Contract("mse_by_step needs deterministic DDIM (eta = 0)".into()));
    }
    let mut sampler = sampler.clone();
    sampler.n = data.n();
    let streams = Streams::new(sampler.seed);
    let (n, d) = (data.n(), data.d());
    let draw = |index: u64| -> Result<SampleBatch> {
        let mut rng = streams.stream(Purpose::Diagnostics, index);
        let mut eps = vec![0.0; n * d];
        rng::fill_normal(&mut rng, &mut eps);
        SampleBatch::new(n, d, eps)
    };

    let mut points = Vec::new();
    let mut failure = None;
    if sampler.grid.max() > cfg.t_split {
        let mut observe = |r: &StepRecord, x: &SampleBatch| {
            let Some(c) = r.t_prev.filter(|c| *c >= cfg.t_split) else { return };
            match draw(1 + c as u64).and_then(|eps| q_sample(data, c, &eps, schedule)) {
                Ok(gt) => points.push(MsePoint { stage: 1, t: Some(c), mse: mse(x, &gt) }),
                Err(e) => failure = Some(e),
            }
        };
        run_sampler_observed(&sampler, model, schedule, &mut observe)?;
    }

    let start = sampler
        .grid
        .steps()
        .iter()
        .copied()
        .filter(|t| *t <= cfg.t_split)
        .max()
        .ok_or_else(|| Error::InvalidGrid(format!("no grid point at or below t_split = {}", cfg.t_split)))?;
    let eps = draw(0)?;
    let x_start = q_sample(data, start, &eps, schedule)?;
    let mut observe = |r: &StepRecord, x: &SampleBatch| match forward(data, r.t_prev, &eps, schedule) {
        Ok(gt) => points.push(MsePoint { stage: 2, t: r.t_prev, mse: mse(x, &gt) }),
        Err(e) => failure = Some(e),
    };
    run_sampler_from(&sampler, model, schedule, x_start, start, Some(&mut observe))?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(MseCurve { t_split: cfg.t_split, start, points })
}
