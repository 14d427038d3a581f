//! Epsilon predictors ε_θ(x, t).

mod analytic;
mod checkpoint;
mod mlp;
mod perturbed;

pub use analytic::{analytic_epsilon, posterior_mean, AnalyticDenoiser, GaussianMoments, Mixture};
pub use checkpoint::{Checkpoint, CHECKPOINT_SCHEMA_VERSION};
pub use mlp::{Mlp, MlpCache, MlpShape};
pub use perturbed::{perturb_epsilon, PerturbationSpec, Perturbed};

use crate::batch::SampleBatch;
use crate::error::Result;

/// What a sampler knows about the step it is about to take.
///
/// Only the perturbation wrapper reads it; plain models ignore it.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    /// Transfer target of the step (`None` = clean end of chain).
    pub t_prev: Option<usize>,
    /// ∂x_prev/∂ε̂ of the sampler update about to consume the prediction.
    pub state_gain: f64,
    /// Distinct per (run, iteration, sub-evaluation).
    pub call_key: u64,
    /// Global chain index of each row; `None` means rows `0..n`.
    pub chains: Option<&'a [usize]>,
}

impl Default for StepContext<'_> {
    fn default() -> Self {
        Self { t_prev: None, state_gain: 1.0, call_key: 0, chains: None }
    }
}

pub trait EpsilonModel: Send + Sync {
    /// Data dimension the model accepts.
    fn dim(&self) -> usize;

    fn predict_in(&self, x: &SampleBatch, t: usize, ctx: &StepContext<'_>) -> Result<SampleBatch>;

    fn predict(&self, x: &SampleBatch, t: usize) -> Result<SampleBatch> {
        self.predict_in(x, t, &StepContext::default())
    }
}

/// A concrete denoiser, as stored in checkpoints.
#[derive(Debug, Clone)]
pub enum DenoiserModel {
    Analytic(AnalyticDenoiser),
    Mlp(Mlp),
    Perturbed(Perturbed<DenoiserModel>),
}

impl DenoiserModel {
    pub fn variant(&self) -> &'static str {
        match self {
            DenoiserModel::Analytic(a) if a.mixture().components().len() == 1 => "analytic-gaussian",
            DenoiserModel::Analytic(_) => "analytic-gmm",
            DenoiserModel::Mlp(_) => "mlp",
            DenoiserModel::Perturbed(_) => "perturbed",
        }
    }

    pub fn perturbed(self, spec: PerturbationSpec) -> Result<Self> {
        Ok(DenoiserModel::Perturbed(perturb_epsilon(self, spec)?))
    }
}

impl EpsilonModel for DenoiserModel {
    fn dim(&self) -> usize {
        match self {
            DenoiserModel::Analytic(m) => m.dim(),
            DenoiserModel::Mlp(m) => m.dim(),
            DenoiserModel::Perturbed(m) => m.dim(),
        }
    }

    fn predict_in(&self, x: &SampleBatch, t: usize, ctx: &StepContext<'_>) -> Result<SampleBatch> {
        match self {
            DenoiserModel::Analytic(m) => m.predict_in(x, t, ctx),
            DenoiserModel::Mlp(m) => m.predict_in(x, t, ctx),
            DenoiserModel::Perturbed(m) => m.predict_in(x, t, ctx),
        }
    }
}

/// Free-function form of [`EpsilonModel::predict`].
pub fn predict_epsilon(model: &dyn EpsilonModel, x: &SampleBatch, t: usize) -> Result<SampleBatch> {
    model.predict(x, t)
}
