//! Pseudo-numerical multistep solvers (S-PNDM, F-PNDM).
//!
//! ε̂ values are combined with Adams-Bashforth weights and pushed through the
//! deterministic DDIM transfer. Warm-up uses a pseudo improved-Euler step
//! (order 2) or pseudo Runge-Kutta steps (order 4).

use super::steps::{ddim_apply, ddim_gain};
use crate::batch::SampleBatch;
use crate::denoisers::{EpsilonModel, StepContext};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

const AB2: [f64; 2] = [3.0 / 2.0, -1.0 / 2.0];
const AB4: [f64; 4] = [55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0];

/// Adams-Bashforth combination of `current` with the most recent history entries.
///
/// `history` is oldest first; order 2 reads one entry, order 4 reads three.
pub fn multistep_combine(order: usize, current: &SampleBatch, history: &[SampleBatch]) -> Result<SampleBatch> {
    let weights: &[f64] = match order {
        2 => &AB2,
        4 => &AB4,
        _ => return Err(Error::Contract(format!("unsupported multistep order {order}"))),
    };
    if history.len() < order - 1 {
        return Err(Error::Contract(format!(
            "order-{order} multistep needs {} history entries, have {}",
            order - 1,
            history.len()
        )));
    }
    let mut out: Vec<f64> = current.as_slice().iter().map(|v| weights[0] * v).collect();
    for (k, w) in weights.iter().enumerate().skip(1) {
        let past = &history[history.len() - k];
        current.same_shape(past)?;
        for (o, v) in out.iter_mut().zip(past.as_slice()) {
            *o += w * v;
        }
    }
    SampleBatch::new(current.n(), current.d(), out)
}

fn average(parts: &[(f64, &SampleBatch)]) -> Result<SampleBatch> {
    let first = parts[0].1;
    let mut out = vec![0.0; first.as_slice().len()];
    for (w, b) in parts {
        for (o, v) in out.iter_mut().zip(b.as_slice()) {
            *o += w * v;
        }
    }
    SampleBatch::new(first.n(), first.d(), out)
}

/// Model-evaluation plumbing shared with the runner.
pub(crate) struct Evaluator<'a> {
    pub model: &'a dyn EpsilonModel,
    pub schedule: &'a NoiseSchedule,
    pub key: u64,
    pub chains: Option<&'a [usize]>,
}

impl Evaluator<'_> {
    pub fn eval(&self, x: &SampleBatch, t: usize, t_prev: Option<usize>, gain: f64, sub: u64) -> Result<SampleBatch> {
        let ctx = StepContext { t_prev, state_gain: gain, call_key: self.key.wrapping_add(sub), chains: self.chains };
        let eps = self.model.predict_in(x, t, &ctx)?;
        if !eps.is_finite() {
            return Err(Error::DivergedSample { timestep: t });
        }
        Ok(eps)
    }
}

/// One PNDM step from `t` to `t_prev`; returns the new state and the ε̂ to append to the history.
pub(crate) fn pndm_step_in(
    order: usize,
    history: &[SampleBatch],
    x: &SampleBatch,
    t: usize,
    t_prev: Option<usize>,
    ev: &Evaluator<'_>,
) -> Result<(SampleBatch, SampleBatch)> {
    if order != 2 && order != 4 {
        return Err(Error::Contract(format!("unsupported PNDM order {order}")));
    }
    let s = ev.schedule;
    let ab = s.alpha_bar(t);
    let ab_prev = s.alpha_bar_at(t_prev);
    let gain = ddim_gain(ab, ab_prev, 0.0);
    let transfer = |state: &SampleBatch, eps: &SampleBatch, to: f64| ddim_apply(state, eps, ab, to, 0.0, None, t);

    if history.len() >= order - 1 {
        let w0 = if order == 2 { AB2[0] } else { AB4[0] };
        let e = ev.eval(x, t, t_prev, w0 * gain, 0)?;
        let combined = multistep_combine(order, &e, history)?;
        return Ok((transfer(x, &combined, ab_prev)?, e));
    }

    let Some(tp) = t_prev else {
        // No room for intermediate evaluations before the clean end.
        let e = ev.eval(x, t, t_prev, gain, 0)?;
        return Ok((transfer(x, &e, ab_prev)?, e));
    };

    if order == 2 {
        let e1 = ev.eval(x, t, t_prev, 0.5 * gain, 0)?;
        let x1 = transfer(x, &e1, ab_prev)?;
        let e2 = ev.eval(&x1, tp, t_prev, 0.5 * gain, 1)?;
        let e = average(&[(0.5, &e1), (0.5, &e2)])?;
        return Ok((transfer(x, &e, ab_prev)?, e1));
    }

    let mid = (t + tp) / 2;
    let ab_mid = s.alpha_bar(mid);
    let e1 = ev.eval(x, t, t_prev, gain / 6.0, 0)?;
    let x1 = transfer(x, &e1, ab_mid)?;
    let e2 = ev.eval(&x1, mid, t_prev, gain / 3.0, 1)?;
    let x2 = transfer(x, &e2, ab_mid)?;
    let e3 = ev.eval(&x2, mid, t_prev, gain / 3.0, 2)?;
    let x3 = transfer(x, &e3, ab_prev)?;
    let e4 = ev.eval(&x3, tp, t_prev, gain / 6.0, 3)?;
    let e = average(&[(1.0 / 6.0, &e1), (1.0 / 3.0, &e2), (1.0 / 3.0, &e3), (1.0 / 6.0, &e4)])?;
    Ok((transfer(x, &e, ab_prev)?, e1))
}

/// One PNDM step of the given order (2 = S-PNDM, 4 = F-PNDM), updating `history` in place.
pub fn pndm_step(
    order: usize,
    history: &mut Vec<SampleBatch>,
    x: &SampleBatch,
    t: usize,
    t_prev: Option<usize>,
    model: &dyn EpsilonModel,
    schedule: &NoiseSchedule,
) -> Result<SampleBatch> {
    let ev = Evaluator { model, schedule, key: 0, chains: None };
    let (next, eps) = pndm_step_in(order, history, x, t, t_prev, &ev)?;
    history.push(eps);
    if history.len() > 3 {
        history.remove(0);
    }
    Ok(next)
}
