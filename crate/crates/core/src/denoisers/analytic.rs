use super::{EpsilonModel, StepContext};
use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use serde::{Deserialize, Serialize};

/// One diagonal-covariance Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub weight: f64,
}

impl GaussianMoments {
    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        Self { mean, variance: vec![variance; d], weight: 1.0 }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Gaussian mixture with validated parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<GaussianMoments>", into = "Vec<GaussianMoments>")]
pub struct Mixture {
    components: Vec<GaussianMoments>,
}

impl Mixture {
    pub fn new(components: Vec<GaussianMoments>) -> Result<Self> {
        let d = components.first().map(GaussianMoments::dim).unwrap_or(0);
        if d == 0 {
            return Err(Error::InvalidModel("mixture needs at least one component of dimension >= 1".into()));
        }
        let mut total = 0.0;
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != d || c.variance.len() != d {
                return Err(Error::InvalidModel(format!("component {k} has inconsistent dimension")));
            }
            if c.mean.iter().any(|m| !m.is_finite()) {
                return Err(Error::InvalidModel(format!("component {k} has a non-finite mean")));
            }
            if c.variance.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidModel(format!("component {k} has a non-positive variance")));
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(Error::InvalidModel(format!("component {k} weight {} outside [0, 1]", c.weight)));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!("mixture weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn single(moments: GaussianMoments) -> Result<Self> {
        Self::new(vec![GaussianMoments { weight: 1.0, ..moments }])
    }

    pub fn components(&self) -> &[GaussianMoments] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for c in &self.components {
            for (acc, v) in m.iter_mut().zip(&c.mean) {
                *acc += c.weight * v;
            }
        }
        m
    }

    /// Full covariance, row-major `d x d`.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim();
        let mu = self.mean();
        let mut cov = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                cov[i * d + i] += c.weight * c.variance[i];
                for j in 0..d {
                    cov[i * d + j] += c.weight * (c.mean[i] - mu[i]) * (c.mean[j] - mu[j]);
                }
            }
        }
        cov
    }

    /// Posterior component probabilities for one noisy row at level `alpha_bar`.
    pub fn responsibilities(&self, x: &[f64], alpha_bar: f64) -> Vec<f64> {
        let sa = alpha_bar.sqrt();
        let noise = 1.0 - alpha_bar;
        let logs: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                if c.weight == 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut lp = c.weight.ln();
                for j in 0..x.len() {
                    let s2 = alpha_bar * c.variance[j] + noise;
                    let r = x[j] - sa * c.mean[j];
                    lp -= 0.5 * (r * r / s2 + s2.ln());
                }
                lp
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|v| v / z).collect()
    }
}

impl From<Mixture> for Vec<GaussianMoments> {
    fn from(m: Mixture) -> Self {
        m.components
    }
}

impl TryFrom<Vec<GaussianMoments>> for Mixture {
    type Error = Error;

    fn try_from(v: Vec<GaussianMoments>) -> Result<Self> {
        Mixture::new(v)
    }
}

fn check_level(alpha_bar: f64) -> Result<()> {
    if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
        return Err(Error::OutOfDomain(format!("alpha_bar = {alpha_bar} must lie in (0, 1)")));
    }
    Ok(())
}

/// Exact E[x0 | x_t] under the forward kernel, row by row.
pub fn posterior_mean(mixture: &Mixture, x: &SampleBatch, alpha_bar: f64) -> Result<SampleBatch> {
    check_level(alpha_bar)?;
    if x.d() != mixture.dim() {
        return Err(Error::Dimension(format!("model dim {} vs input dim {}", mixture.dim(), x.d())));
    }
    let sa = alpha_bar.sqrt();
    let noise = 1.0 - alpha_bar;
    let mut out = SampleBatch::zeros(x.n(), x.d());
    for i in 0..x.n() {
        let row = x.row(i);
        let resp = mixture.responsibilities(row, alpha_bar);
        let dst = out.row_mut(i);
        for (c, r) in mixture.components.iter().zip(resp) {
            if r == 0.0 {
                continue;
            }
            for j in 0..row.len() {
                let v = c.variance[j];
                dst[j] += r * (sa * v * row[j] + noise * c.mean[j]) / (alpha_bar * v + noise);
            }
        }
    }
    Ok(out)
}

/// Bayes-optimal ε̂ = (x − √ᾱ·E[x0|x]) / √(1−ᾱ).
pub fn analytic_epsilon(mixture: &Mixture, x: &SampleBatch, alpha_bar: f64) -> Result<SampleBatch> {
    let mut x0 = posterior_mean(mixture, x, alpha_bar)?;
    let sa = alpha_bar.sqrt();
    let sn = (1.0 - alpha_bar).sqrt();
    for (e, xv) in x0.as_mut_slice().iter_mut().zip(x.as_slice()) {
        *e = (xv - sa * *e) / sn;
    }
    Ok(x0)
}

/// Exact denoiser for mixture data under a fixed schedule.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    mixture: Mixture,
    schedule: NoiseSchedule,
}

impl AnalyticDenoiser {
    pub fn new(mixture: Mixture, schedule: NoiseSchedule) -> Self {
        Self { mixture, schedule }
    }

    pub fn mixture(&self) -> &Mixture {
        &self.mixture
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }
}

impl EpsilonModel for AnalyticDenoiser {
    fn dim(&self) -> usize {
        self.mixture.dim()
    }

    fn predict_in(&self, x: &SampleBatch, t: usize, _ctx: &StepContext<'_>) -> Result<SampleBatch> {
        self.schedule.check_timestep(t)?;
        analytic_epsilon(&self.mixture, x, self.schedule.alpha_bar(t))
    }
}
