//! Versioned JSON checkpoints.

use super::{AnalyticDenoiser, DenoiserModel, Mixture, Mlp, MlpShape, PerturbationSpec, Perturbed};
use crate::error::{Error, Result};
use crate::io::write_artifact;
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelPayload {
    Analytic { components: Mixture },
    Mlp { shape: MlpShape, params: Vec<f64> },
    Perturbed { inner: Box<ModelPayload>, spec: PerturbationSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub variant: String,
    pub schedule_fingerprint: String,
    /// Training configuration echoed verbatim, if the model was trained.
    #[serde(default)]
    pub train_config: Option<serde_json::Value>,
    pub model: ModelPayload,
}

fn payload(model: &DenoiserModel) -> ModelPayload {
    match model {
        DenoiserModel::Analytic(a) => ModelPayload::Analytic { components: a.mixture().clone() },
        DenoiserModel::Mlp(m) => ModelPayload::Mlp { shape: m.shape().clone(), params: m.params().to_vec() },
        DenoiserModel::Perturbed(p) => ModelPayload::Perturbed { inner: Box::new(payload(p.inner())), spec: p.spec().clone() },
    }
}

fn rebuild(payload: &ModelPayload, schedule: &NoiseSchedule) -> Result<DenoiserModel> {
    Ok(match payload {
        ModelPayload::Analytic { components } => {
            DenoiserModel::Analytic(AnalyticDenoiser::new(components.clone(), schedule.clone()))
        }
        ModelPayload::Mlp { shape, params } => DenoiserModel::Mlp(Mlp::from_params(shape.clone(), params.clone())?),
        ModelPayload::Perturbed { inner, spec } => {
            let p: Perturbed<DenoiserModel> = super::perturb_epsilon(rebuild(inner, schedule)?, spec.clone())?;
            DenoiserModel::Perturbed(p)
        }
    })
}

impl Checkpoint {
    pub fn new(model: &DenoiserModel, schedule: &NoiseSchedule, train_config: Option<serde_json::Value>) -> Self {
        Self {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            variant: model.variant().to_string(),
            schedule_fingerprint: schedule.fingerprint(),
            train_config,
            model: payload(model),
        }
    }

    /// Rebuilds the model, refusing a schedule other than the one it was saved with.
    pub fn to_model(&self, schedule: &NoiseSchedule) -> Result<DenoiserModel> {
        if self.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!("unsupported schema version {}", self.schema_version)));
        }
        if self.schedule_fingerprint != schedule.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "schedule fingerprint {} does not match {}",
                self.schedule_fingerprint,
                schedule.fingerprint()
            )));
        }
        let model = rebuild(&self.model, schedule)?;
        if model.variant() != self.variant {
            return Err(Error::Checkpoint(format!("variant tag {} vs payload {}", self.variant, model.variant())));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_artifact(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
