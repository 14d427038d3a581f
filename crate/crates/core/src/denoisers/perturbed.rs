//! Controlled prediction-error injection.
//!
//! The wrapped model adds `z · φ_t / |g|` to the inner prediction, where `g` is
//! the sampler's state gain ∂x_prev/∂ε̂ passed in the [`StepContext`]. The
//! state produced by the step then carries an extra `φ_t · z` with `z ~ N(0, I)`,
//! i.e. `x̂_{t-1} = x_{t-1} + φ_{t-1}·e_{t-1}` with standard-normal `e`.

use super::{EpsilonModel, StepContext};
use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::rng::{self, keyed_stream};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Per-timestep state error scale φ_t, indexed by the evaluation timestep.
    pub phi: Vec<f64>,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn constant(steps: usize, phi: f64, seed: u64) -> Self {
        Self { phi: vec![phi; steps], seed }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.phi.iter().position(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::InvalidSpec(format!("phi[{t}] = {} must be finite and >= 0", self.phi[t])));
        }
        Ok(())
    }

    /// λ_t² = φ_t² + (1 − ᾱ_t), the total noise variance of a perturbed state.
    pub fn lambda_sq(&self, t: usize, alpha_bar: f64) -> f64 {
        self.phi[t] * self.phi[t] + (1.0 - alpha_bar)
    }
}

#[derive(Debug, Clone)]
pub struct Perturbed<M> {
    inner: Box<M>,
    spec: PerturbationSpec,
}

pub fn perturb_epsilon<M: EpsilonModel>(inner: M, spec: PerturbationSpec) -> Result<Perturbed<M>> {
    spec.validate()?;
    Ok(Perturbed { inner: Box::new(inner), spec })
}

impl<M> Perturbed<M> {
    pub fn inner(&self) -> &M {
        &self.inner
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }
}

impl<M: EpsilonModel> EpsilonModel for Perturbed<M> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_in(&self, x: &SampleBatch, t: usize, ctx: &StepContext<'_>) -> Result<SampleBatch> {
        let mut out = self.inner.predict_in(x, t, ctx)?;
        let phi = *self
            .spec
            .phi
            .get(t)
            .ok_or_else(|| Error::InvalidSpec(format!("no phi for timestep {t}")))?;
        let gain = ctx.state_gain.abs();
        if phi == 0.0 || gain < 1e-300 {
            return Ok(out);
        }
        let scale = phi / gain;
        let seed = self.spec.seed.to_le_bytes();
        let key = ctx.call_key.to_le_bytes();
        for i in 0..out.n() {
            let chain = ctx.chains.map_or(i, |c| c[i]) as u64;
            let mut rng = keyed_stream(&[b"perturbation", &seed, &key], chain);
            for v in out.row_mut(i) {
                *v += scale * rng::normal(&mut rng);
            }
        }
        Ok(out)
    }
}
