//! L_simple training of ε-predictors on toy data.

use crate::batch::SampleBatch;
use crate::denoisers::{EpsilonModel, Mixture, Mlp};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng, Streams};
use crate::schedule::{q_sample, NoiseSchedule};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch_size: 128, learning_rate: 1e-3, optimizer: OptimizerKind::Adam, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and >= 0", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Anything [`training_step`] can update.
pub trait Trainable {
    /// Per-row ε prediction at per-row timesteps.
    fn predict_rows(&self, x: &SampleBatch, ts: &[usize]) -> Result<SampleBatch>;

    /// L_simple and its gradient with respect to [`Trainable::params_mut`].
    fn loss_and_grad(&self, xt: &SampleBatch, ts: &[usize], eps: &SampleBatch) -> Result<(f64, Vec<f64>)>;

    fn params_mut(&mut self) -> &mut [f64];
}

/// Mean over rows of ‖ε − ε̂‖².
pub fn simple_loss(eps: &SampleBatch, eps_hat: &SampleBatch) -> f64 {
    let total: f64 = eps.as_slice().iter().zip(eps_hat.as_slice()).map(|(a, b)| (a - b) * (a - b)).sum();
    total / eps.n() as f64
}

impl Trainable for Mlp {
    fn predict_rows(&self, x: &SampleBatch, ts: &[usize]) -> Result<SampleBatch> {
        Ok(self.forward(x, ts)?.0)
    }

    fn loss_and_grad(&self, xt: &SampleBatch, ts: &[usize], eps: &SampleBatch) -> Result<(f64, Vec<f64>)> {
        let (eps_hat, cache) = self.forward_raw(xt, ts)?;
        let scale = 2.0 / xt.n() as f64;
        let dout: Vec<f64> = eps_hat.iter().zip(eps.as_slice()).map(|(p, e)| scale * (p - e)).collect();
        let loss = eps_hat.iter().zip(eps.as_slice()).map(|(p, e)| (p - e) * (p - e)).sum::<f64>() / xt.n() as f64;
        Ok((loss, self.backward(&cache, &dout)))
    }

    fn params_mut(&mut self) -> &mut [f64] {
        Mlp::params_mut(self)
    }
}

/// A model evaluated but never updated.
pub struct Frozen<'a, M: ?Sized>(pub &'a M);

impl<M: EpsilonModel + ?Sized> Trainable for Frozen<'_, M> {
    fn predict_rows(&self, x: &SampleBatch, ts: &[usize]) -> Result<SampleBatch> {
        let mut out = Vec::with_capacity(x.n() * x.d());
        for (i, t) in ts.iter().enumerate() {
            out.extend_from_slice(self.0.predict(&x.select_rows(&[i]), *t)?.as_slice());
        }
        SampleBatch::new(x.n(), x.d(), out)
    }

    fn loss_and_grad(&self, xt: &SampleBatch, ts: &[usize], eps: &SampleBatch) -> Result<(f64, Vec<f64>)> {
        Ok((simple_loss(eps, &self.predict_rows(xt, ts)?), Vec::new()))
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { lr: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64, m: Vec<f64>, v: Vec<f64>, step: i32 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => {
                Optimizer::Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), step: 0 }
            }
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        match self {
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= *lr * g;
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, m, v, step } => {
                if m.len() != params.len() {
                    *m = vec![0.0; params.len()];
                    *v = vec![0.0; params.len()];
                }
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for i in 0..params.len() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                    params[i] -= *lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                }
            }
        }
    }
}

/// Draws per-row t ~ U{0..T-1} and ε ~ N(0, I) and forms x_t.
pub fn noised_batch(
    x0: &SampleBatch,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
) -> Result<(Vec<usize>, SampleBatch, SampleBatch)> {
    let ts: Vec<usize> = (0..x0.n()).map(|_| rng.random_range(0..schedule.len())).collect();
    let eps = SampleBatch::standard_normal(x0.n(), x0.d(), rng);
    let mut xt = Vec::with_capacity(x0.n() * x0.d());
    for (i, t) in ts.iter().enumerate() {
        let row = q_sample(&x0.select_rows(&[i]), *t, &eps.select_rows(&[i]), schedule)?;
        xt.extend_from_slice(row.as_slice());
    }
    Ok((ts, eps, SampleBatch::new(x0.n(), x0.d(), xt)?))
}

/// One gradient step of the simple loss on a batch; returns the loss before the update.
pub fn training_step<M: Trainable + ?Sized>(
    model: &mut M,
    optimizer: &mut Optimizer,
    x0: &SampleBatch,
    schedule: &NoiseSchedule,
    rng: &mut StreamRng,
    step: usize,
) -> Result<f64> {
    let (ts, eps, xt) = noised_batch(x0, schedule, rng)?;
    let (loss, grad) = model.loss_and_grad(&xt, &ts, &eps)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence { step, loss });
    }
    if !grad.is_empty() {
        optimizer.update(model.params_mut(), &grad);
    }
    Ok(loss)
}

/// Trains for `config.epochs` passes over `data`, reshuffling each epoch.
///
/// Returns the per-step loss curve.
pub fn train<M: Trainable + ?Sized>(
    model: &mut M,
    data: &SampleBatch,
    config: &TrainConfig,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    config.validate()?;
    let streams = Streams::new(config.seed);
    let mut noise_rng = streams.stream(Purpose::Training, 0);
    let mut order_rng = streams.stream(Purpose::Training, 1);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..data.n()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(config.batch_size) {
            let x0 = data.select_rows(chunk);
            let loss = training_step(model, &mut optimizer, &x0, schedule, &mut noise_rng, losses.len())?;
            losses.push(loss);
        }
    }
    Ok(losses)
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut sum = 0.0;
    for i in 0..losses.len() {
        sum += losses[i];
        if i >= window {
            sum -= losses[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

pub fn loss_curve_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{}\n", crate::io::fmt17(*l)));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Gaussian { mean: Vec<f64>, variance: f64, size: usize },
    Gmm { components: Mixture, size: usize },
    SwissRoll { size: usize, noise: f64 },
    /// Zero-mean rows whose own variances are uniform on `[var_lo, var_hi]`.
    Heterogeneous { dim: usize, size: usize, var_lo: f64, var_hi: f64 },
}

impl DatasetSpec {
    pub fn size(&self) -> usize {
        match self {
            DatasetSpec::Gaussian { size, .. }
            | DatasetSpec::Gmm { size, .. }
            | DatasetSpec::SwissRoll { size, .. }
            | DatasetSpec::Heterogeneous { size, .. } => *size,
        }
    }

    /// Exact moments, when the dataset is a Gaussian mixture.
    pub fn mixture(&self) -> Result<Option<Mixture>> {
        Ok(match self {
            DatasetSpec::Gaussian { mean, variance, .. } => {
                Some(Mixture::single(crate::denoisers::GaussianMoments::isotropic(mean.clone(), *variance))?)
            }
            DatasetSpec::Gmm { components, .. } => Some(components.clone()),
            DatasetSpec::SwissRoll { .. } | DatasetSpec::Heterogeneous { .. } => None,
        })
    }

    pub fn generate(&self, rng: &mut StreamRng) -> Result<SampleBatch> {
        if self.size() == 0 {
            return Err(Error::Config("dataset size must be >= 1".into()));
        }
        match self {
            DatasetSpec::SwissRoll { size, noise } => Ok(swiss_roll(*size, *noise, rng)),
            DatasetSpec::Heterogeneous { dim, size, var_lo, var_hi } => {
                if !(0.0 <= *var_lo && var_lo <= var_hi) {
                    return Err(Error::Config(format!("need 0 <= var_lo <= var_hi, got {var_lo}, {var_hi}")));
                }
                crate::diagnostics::heterogeneous_data(*size, *dim, *var_lo, *var_hi, rng)
            }
            _ => Ok(sample_mixture(&self.mixture()?.expect("mixture dataset"), self.size(), rng)),
        }
    }
}

pub fn sample_mixture(mixture: &Mixture, n: usize, rng: &mut StreamRng) -> SampleBatch {
    let d = mixture.dim();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let comps = mixture.components();
        let mut pick = comps.len() - 1;
        for (k, c) in comps.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &comps[pick];
        for j in 0..d {
            data.push(c.mean[j] + c.variance[j].sqrt() * rng::normal(rng));
        }
    }
    SampleBatch::new(n, d, data).expect("finite mixture draws")
}

/// 2-D swiss roll scaled to roughly unit spread.
pub fn swiss_roll(n: usize, noise: f64, rng: &mut StreamRng) -> SampleBatch {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let t = 1.5 * std::f64::consts::PI * (1.0 + 2.0 * u);
        data.push((t * t.cos() + noise * rng::normal(rng)) / 7.0);
        data.push((t * t.sin() + noise * rng::normal(rng)) / 7.0);
    }
    SampleBatch::new(n, 2, data).expect("finite swiss roll")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoisers::{AnalyticDenoiser, GaussianMoments, MlpShape, StepContext};

    struct Oracle<'a> {
        eps: &'a SampleBatch,
    }

    impl Trainable for Oracle<'_> {
        fn predict_rows(&self, _: &SampleBatch, _: &[usize]) -> Result<SampleBatch> {
            Ok(self.eps.clone())
        }
        fn loss_and_grad(&self, _: &SampleBatch, _: &[usize], eps: &SampleBatch) -> Result<(f64, Vec<f64>)> {
            Ok((simple_loss(eps, eps), Vec::new()))
        }
        fn params_mut(&mut self) -> &mut [f64] {
            &mut []
        }
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let e = SampleBatch::zeros(1, 2);
        let mut oracle = Oracle { eps: &e };
        let schedule = NoiseSchedule::default();
        let x0 = SampleBatch::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let loss = training_step(&mut oracle, &mut opt, &x0, &schedule, &mut Streams::new(0).stream(Purpose::Training, 0), 0);
        assert_eq!(loss.unwrap(), 0.0);
    }

    #[test]
    fn frozen_analytic_loss_is_the_bayes_risk() {
        // Unit Gaussian data: ε | x_t ~ N(√(1−ᾱ)x_t, ᾱ I), so the risk is d · mean_t ᾱ_t.
        let schedule = NoiseSchedule::default();
        let d = 4;
        let mix = Mixture::single(GaussianMoments::isotropic(vec![0.0; d], 1.0)).unwrap();
        let oracle = AnalyticDenoiser::new(mix.clone(), schedule.clone());
        let risk = d as f64 * schedule.alpha_bars().iter().sum::<f64>() / schedule.len() as f64;
        let mut frozen = Frozen(&oracle);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 1e-3);
        let mut rng = Streams::new(5).stream(Purpose::Training, 0);
        let mut data_rng = Streams::new(5).stream(Purpose::Data, 0);
        let losses: Vec<f64> = (0..20)
            .map(|s| {
                let x0 = sample_mixture(&mix, 1000, &mut data_rng);
                training_step(&mut frozen, &mut opt, &x0, &schedule, &mut rng, s).unwrap()
            })
            .collect();
        let mean = losses.iter().sum::<f64>() / 20.0;
        assert!((mean - risk).abs() < 0.05 * risk, "mean loss {mean} vs risk {risk}");
    }

    #[test]
    fn training_is_reproducible() {
        let schedule = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
        let data = swiss_roll(64, 0.1, &mut Streams::new(1).stream(Purpose::Data, 0));
        let config = TrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
        let run = || {
            let shape = MlpShape { dim: 2, hidden: vec![16, 16], time_dim: 8 };
            let mut m = Mlp::new(shape, &mut Streams::new(1).stream(Purpose::Init, 0)).unwrap();
            let losses = train(&mut m, &data, &config, &schedule).unwrap();
            (losses, m)
        };
        let (l1, m1) = run();
        let (l2, m2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert_eq!(l1.len(), 12);
    }

    #[test]
    fn non_finite_loss_is_divergence() {
        let schedule = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let shape = MlpShape { dim: 2, hidden: vec![4], time_dim: 2 };
        let params = vec![1e300; shape.param_count()];
        let mut m = Mlp::from_params(shape, params).unwrap();
        let x0 = SampleBatch::new(1, 2, vec![1.0, 1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1);
        let r = training_step(&mut m, &mut opt, &x0, &schedule, &mut Streams::new(0).stream(Purpose::Training, 0), 3);
        assert!(matches!(r, Err(Error::Divergence { step: 3, .. })), "{r:?}");
    }

    #[test]
    fn mlp_context_is_ignored() {
        let shape = MlpShape { dim: 2, hidden: vec![4], time_dim: 2 };
        let m = Mlp::new(shape, &mut Streams::new(0).stream(Purpose::Init, 0)).unwrap();
        let x = SampleBatch::new(1, 2, vec![0.5, 0.5]).unwrap();
        let ctx = StepContext { call_key: 5, state_gain: 3.0, ..Default::default() };
        assert_eq!(m.predict_in(&x, 3, &ctx).unwrap(), m.predict(&x, 3).unwrap());
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
