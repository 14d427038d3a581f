//! Baseline backward samplers and the shared trajectory runner.

mod pndm;
mod steps;

pub use pndm::{multistep_combine, pndm_step};
pub use steps::{
    ddim_gain, ddim_sigma, ddim_step, ddim_update, ddpm_step, ddpm_update, PosteriorParams,
};

use crate::batch::SampleBatch;
use crate::denoisers::EpsilonModel;
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng, Streams};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::timeshift::{intra_sample_variance, ShiftEvent};
use pndm::{pndm_step_in, Evaluator};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Ddpm,
    Ddim,
    SPndm,
    FPndm,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Ddpm, Method::Ddim, Method::SPndm, Method::FPndm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ddpm => "ddpm",
            Method::Ddim => "ddim",
            Method::SPndm => "s-pndm",
            Method::FPndm => "f-pndm",
        }
    }

    fn pndm_order(self) -> Option<usize> {
        match self {
            Method::SPndm => Some(2),
            Method::FPndm => Some(4),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sampler '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub method: Method,
    pub grid: TimeGrid,
    /// DDIM stochasticity; ignored by the other methods.
    pub eta: f64,
    /// Number of chains.
    pub n: usize,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn new(method: Method, grid: TimeGrid, n: usize, seed: u64) -> Self {
        Self { method, grid, eta: 0.0, n, seed }
    }

    fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta = {} must be >= 0", self.eta)));
        }
        if self.n == 0 {
            return Err(Error::Config("need at least one chain".into()));
        }
        if self.grid.max() >= schedule.len() {
            return Err(Error::InvalidGrid(format!("grid reaches {} but T = {}", self.grid.max(), schedule.len())));
        }
        Ok(())
    }
}

/// One backward iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Nominal grid timestep of the iteration.
    pub t: usize,
    /// Distinct timesteps fed to the model (one entry unless chains shift independently).
    pub t_used: Vec<usize>,
    /// Transfer target; `None` is the clean end of the chain.
    pub t_prev: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shifts: Vec<ShiftEvent>,
    pub state_norm: f64,
    /// Mean intra-sample variance of the produced state; absent for d < 2.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub step: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub warnings: Vec<Warning>,
}

impl Trajectory {
    /// Line-delimited JSON, one record per line, warnings last.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        for w in &self.warnings {
            out.push_str(&serde_json::json!({ "warning": w }).to_string());
            out.push('\n');
        }
        out
    }

    pub fn shift_events(&self) -> impl Iterator<Item = &ShiftEvent> {
        self.records.iter().flat_map(|r| r.shifts.iter())
    }
}

/// What the runner asks after each step: per-chain timestep overrides for the next iteration.
pub(crate) struct Decision {
    pub next: Vec<Option<usize>>,
    pub events: Vec<ShiftEvent>,
}

pub(crate) type Policy<'a> = dyn FnMut(usize, usize, Option<usize>, &SampleBatch) -> Result<Decision> + 'a;
pub(crate) type Observer<'a> = dyn FnMut(&StepRecord, &SampleBatch) + 'a;

fn call_key(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add((step as u64) << 4)
}

/// Draws `x_T` row by row from the per-chain streams.
fn initial_state(rngs: &mut [StreamRng], d: usize) -> Result<SampleBatch> {
    let mut data = vec![0.0; rngs.len() * d];
    for (rng, row) in rngs.iter_mut().zip(data.chunks_mut(d)) {
        rng::fill_normal(rng, row);
    }
    SampleBatch::new(rngs.len(), d, data)
}

fn scatter(dst: &mut [f64], rows: &[usize], src: &SampleBatch) {
    let d = src.d();
    for (k, &i) in rows.iter().enumerate() {
        dst[i * d..(i + 1) * d].copy_from_slice(src.row(k));
    }
}

/// The backward loop shared by the baseline and time-shift samplers.
///
/// `init` replaces the standard-normal start; `transitions` lists the
/// `(t, t_prev)` pairs to run.
pub(crate) fn drive(
    config: &SamplerConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
    init: Option<SampleBatch>,
    transitions: &[(usize, Option<usize>)],
    policy: &mut Policy<'_>,
    mut observer: Option<&mut Observer<'_>>,
) -> Result<(SampleBatch, Trajectory)> {
    config.validate(schedule)?;
    let d = model.dim();
    let streams = Streams::new(config.seed);
    let n = init.as_ref().map_or(config.n, SampleBatch::n);
    let mut rngs: Vec<StreamRng> = (0..n).map(|i| streams.stream(Purpose::Sampling, i as u64)).collect();
    let mut x = match init {
        Some(x) => x,
        None => initial_state(&mut rngs, d)?,
    };
    if x.d() != d {
        return Err(Error::Dimension(format!("model dim {d} vs state dim {}", x.d())));
    }
    let all_rows: Vec<usize> = (0..n).collect();
    let mut shift: Vec<Option<usize>> = vec![None; n];
    let mut history: Vec<SampleBatch> = Vec::new();
    let mut trajectory = Trajectory::default();

    for (step, &(t, t_prev)) in transitions.iter().enumerate() {
        schedule.check_timestep(t)?;
        let used: Vec<usize> = shift.iter().map(|s| s.unwrap_or(t)).collect();
        let needs_z = t_prev.is_some()
            && match config.method {
                Method::Ddpm => true,
                Method::Ddim => config.eta > 0.0,
                _ => false,
            };
        let z = if needs_z { Some(initial_state(&mut rngs, d)?) } else { None };

        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, u) in used.iter().enumerate() {
            groups.entry(*u).or_default().push(i);
        }
        let single = groups.len() == 1;
        let mut next = vec![0.0; n * d];
        let mut pushed = vec![0.0; n * d];
        for (&tu, rows) in groups.iter().rev() {
            let pick = |b: &SampleBatch| if single { b.clone() } else { b.select_rows(rows) };
            let xs = pick(&x);
            let zs = z.as_ref().map(pick);
            let ev = Evaluator {
                model,
                schedule,
                key: call_key(config.seed, step),
                chains: Some(if single { &all_rows } else { rows }),
            };
            let ab = schedule.alpha_bar(tu);
            let ab_prev = schedule.alpha_bar_at(t_prev);
            let out = match config.method {
                Method::Ddpm => {
                    let p = PosteriorParams::new(ab, ab_prev)?;
                    if p.clamped && t_prev.is_some() {
                        trajectory.warnings.push(Warning {
                            step,
                            message: format!("DDPM transfer {tu} -> {t_prev:?} has alpha >= 1; variance clamped to 0"),
                        });
                    }
                    let eps = ev.eval(&xs, tu, t_prev, p.state_gain(), 0)?;
                    steps::ddpm_apply(&xs, &eps, zs.as_ref(), &p, t)?
                }
                Method::Ddim => {
                    let sigma = ddim_sigma(ab, ab_prev, config.eta);
                    let eps = ev.eval(&xs, tu, t_prev, ddim_gain(ab, ab_prev, sigma), 0)?;
                    steps::ddim_apply(&xs, &eps, ab, ab_prev, config.eta, zs.as_ref(), t)?
                }
                Method::SPndm | Method::FPndm => {
                    let order = config.method.pndm_order().unwrap();
                    let sub: Vec<SampleBatch> = history.iter().map(pick).collect();
                    let (out, eps) = pndm_step_in(order, &sub, &xs, tu, t_prev, &ev)?;
                    scatter(&mut pushed, rows, &eps);
                    out
                }
            };
            scatter(&mut next, rows, &out);
        }
        x = steps::finish(&x, next, t)?;
        if config.method.pndm_order().is_some() {
            history.push(SampleBatch::new(n, d, pushed)?);
            if history.len() > 3 {
                history.remove(0);
            }
        }

        let decision = policy(step, t, t_prev, &x)?;
        shift = if decision.next.is_empty() { vec![None; n] } else { decision.next };
        if let Some(tp) = t_prev {
            for (i, s) in shift.iter().enumerate() {
                let next_used = s.unwrap_or(tp);
                if next_used >= used[i] {
                    trajectory.warnings.push(Warning {
                        step,
                        message: format!("chain {i}: consumed timestep {next_used} follows {}", used[i]),
                    });
                    break;
                }
            }
        }
        let mut distinct: Vec<usize> = groups.keys().copied().collect();
        distinct.reverse();
        let record = StepRecord {
            step,
            t,
            t_used: distinct,
            t_prev,
            shifts: decision.events,
            state_norm: x.mean_norm(),
            variance: mean_variance(&x),
        };
        if let Some(obs) = observer.as_mut() {
            obs(&record, &x);
        }
        trajectory.records.push(record);
    }
    Ok((x, trajectory))
}

pub(crate) fn mean_variance(x: &SampleBatch) -> Option<f64> {
    if x.d() < 2 {
        return None;
    }
    Some(x.rows().map(|r| intra_sample_variance(r).unwrap()).sum::<f64>() / x.n() as f64)
}

/// Runs a baseline sampler from `x_T ~ N(0, I)` down the grid.
pub fn run_sampler(
    config: &SamplerConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
) -> Result<(SampleBatch, Trajectory)> {
    let mut none = |_: usize, _: usize, _: Option<usize>, _: &SampleBatch| Ok(Decision { next: Vec::new(), events: Vec::new() });
    drive(config, model, schedule, None, &config.grid.transitions(), &mut none, None)
}

/// Baseline sampler started from a given state at `start`, running the grid steps below it.
pub fn run_sampler_from(
    config: &SamplerConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
    x_start: SampleBatch,
    start: usize,
    observer: Option<&mut Observer<'_>>,
) -> Result<(SampleBatch, Trajectory)> {
    let mut none = |_: usize, _: usize, _: Option<usize>, _: &SampleBatch| Ok(Decision { next: Vec::new(), events: Vec::new() });
    let transitions = transitions_from(&config.grid, start)?;
    drive(config, model, schedule, Some(x_start), &transitions, &mut none, observer)
}

/// Grid transitions starting at grid point `start`.
pub fn transitions_from(grid: &TimeGrid, start: usize) -> Result<Vec<(usize, Option<usize>)>> {
    let all = grid.transitions();
    let pos = all
        .iter()
        .position(|(t, _)| *t == start)
        .ok_or_else(|| Error::InvalidGrid(format!("{start} is not a grid point")))?;
    Ok(all[pos..].to_vec())
}

/// Baseline run with a per-step observer.
pub fn run_sampler_observed(
    config: &SamplerConfig,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
    observer: &mut Observer<'_>,
) -> Result<(SampleBatch, Trajectory)> {
    let mut none = |_: usize, _: usize, _: Option<usize>, _: &SampleBatch| Ok(Decision { next: Vec::new(), events: Vec::new() });
    drive(config, model, schedule, None, &config.grid.transitions(), &mut none, Some(observer))
}
