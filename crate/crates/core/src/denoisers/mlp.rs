use super::{EpsilonModel, StepContext};
use crate::batch::SampleBatch;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpShape {
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Width of the sinusoidal time embedding; even.
    pub time_dim: usize,
}

impl MlpShape {
    /// Three hidden SiLU layers of width 128 and a 32-wide time embedding.
    pub fn standard(dim: usize) -> Self {
        Self { dim, hidden: vec![128; 3], time_dim: 32 }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.dim + self.time_dim];
        widths.extend(&self.hidden);
        widths.push(self.dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.time_dim == 0 || !self.time_dim.is_multiple_of(2) || self.hidden.contains(&0) {
            return Err(Error::InvalidModel(format!("bad MLP shape {self:?}")));
        }
        Ok(())
    }
}

/// Fully connected ε-predictor with SiLU activations.
///
/// Parameters live in one flat vector, layer by layer, each as a row-major
/// `out x in` weight matrix followed by the `out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    shape: MlpShape,
    params: Vec<f64>,
}

/// Forward activations kept for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    n: usize,
    /// Input to each layer (index 0 is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn time_embedding(t: f64, width: usize, out: &mut [f64]) {
    let half = width / 2;
    for k in 0..half {
        let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
        out[k] = (t * freq).sin();
        out[half + k] = (t * freq).cos();
    }
}

impl Mlp {
    pub fn new(shape: MlpShape, rng: &mut StreamRng) -> Result<Self> {
        shape.validate()?;
        let mut params = Vec::with_capacity(shape.param_count());
        for (fan_in, fan_out) in shape.layer_dims() {
            let bound = (1.0 / fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { shape, params })
    }

    pub fn from_params(shape: MlpShape, params: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if params.len() != shape.param_count() {
            return Err(Error::InvalidModel(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidModel("non-finite parameter".into()));
        }
        Ok(Self { shape, params })
    }

    pub fn shape(&self) -> &MlpShape {
        &self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Forward pass with one timestep per row.
    pub fn forward(&self, x: &SampleBatch, ts: &[usize]) -> Result<(SampleBatch, MlpCache)> {
        let (raw, cache) = self.forward_raw(x, ts)?;
        let out = SampleBatch::new(x.n(), x.d(), raw).map_err(|_| Error::InvalidModel("non-finite MLP output".into()))?;
        Ok((out, cache))
    }

    /// Like [`Mlp::forward`] but returns the flat output without a finiteness check.
    pub fn forward_raw(&self, x: &SampleBatch, ts: &[usize]) -> Result<(Vec<f64>, MlpCache)> {
        if x.d() != self.shape.dim {
            return Err(Error::Dimension(format!("MLP dim {} vs input dim {}", self.shape.dim, x.d())));
        }
        if ts.len() != x.n() {
            return Err(Error::Dimension(format!("{} timesteps for {} rows", ts.len(), x.n())));
        }
        let n = x.n();
        let d = self.shape.dim;
        let width0 = d + self.shape.time_dim;
        let mut input = vec![0.0; n * width0];
        for i in 0..n {
            let row = &mut input[i * width0..(i + 1) * width0];
            row[..d].copy_from_slice(x.row(i));
            time_embedding(ts[i] as f64, self.shape.time_dim, &mut row[d..]);
        }
        let dims = self.shape.layer_dims();
        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(dims.len() - 1);
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            let h = inputs.last().unwrap();
            let mut z = vec![0.0; n * fan_out];
            for i in 0..n {
                let hi = &h[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let wo = &w[o * fan_in..(o + 1) * fan_in];
                    z[i * fan_out + o] = b[o] + wo.iter().zip(hi).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if l + 1 < dims.len() {
                let act = z.iter().map(|v| silu(*v)).collect();
                pre.push(z);
                inputs.push(act);
            } else {
                return Ok((z, MlpCache { n, inputs, pre }));
            }
        }
        unreachable!("MLP has at least one layer")
    }

    /// Gradient of `Σ dout ⊙ output` with respect to every parameter.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64]) -> Vec<f64> {
        let dims = self.shape.layer_dims();
        let n = cache.n;
        let mut grad = vec![0.0; self.params.len()];
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &(i, o) in &dims {
            offsets.push(acc);
            acc += i * o + o;
        }
        let mut delta = dout.to_vec();
        for l in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[l];
            let off = offsets[l];
            let w = &self.params[off..off + fan_in * fan_out];
            let h = &cache.inputs[l];
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for i in 0..n {
                let hi = &h[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let dz = delta[i * fan_out + o];
                    gb[o] += dz;
                    for (g, hv) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(hi) {
                        *g += dz * hv;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let mut dh = vec![0.0; n * fan_in];
            for i in 0..n {
                let dhi = &mut dh[i * fan_in..(i + 1) * fan_in];
                for o in 0..fan_out {
                    let dz = delta[i * fan_out + o];
                    for (g, wv) in dhi.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *g += dz * wv;
                    }
                }
            }
            let z = &cache.pre[l - 1];
            for (g, zv) in dh.iter_mut().zip(z) {
                *g *= silu_grad(*zv);
            }
            delta = dh;
        }
        grad
    }
}

impl EpsilonModel for Mlp {
    fn dim(&self) -> usize {
        self.shape.dim
    }

    fn predict_in(&self, x: &SampleBatch, t: usize, _ctx: &StepContext<'_>) -> Result<SampleBatch> {
        let ts = vec![t; x.n()];
        Ok(self.forward(x, &ts)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Purpose, Streams};

    fn tiny() -> Mlp {
        let shape = MlpShape { dim: 2, hidden: vec![6, 5], time_dim: 4 };
        Mlp::new(shape, &mut Streams::new(1).stream(Purpose::Init, 0)).unwrap()
    }

    #[test]
    fn parameter_count_matches_layout() {
        let s = MlpShape::standard(2);
        assert_eq!(s.param_count(), (34 * 128 + 128) + 2 * (128 * 128 + 128) + (128 * 2 + 2));
    }

    #[test]
    fn prediction_is_deterministic() {
        let m = tiny();
        let x = SampleBatch::new(2, 2, vec![0.1, -0.3, 1.5, 0.2]).unwrap();
        let a = m.predict(&x, 17).unwrap();
        let b = m.predict(&x, 17).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_eq!(a.n(), 2);
        assert_eq!(a.d(), 2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = tiny();
        let x = SampleBatch::new(3, 2, vec![0.1, -0.3, 1.5, 0.2, -0.7, 0.9]).unwrap();
        let ts = [3, 50, 999];
        let weights = [0.3, -1.1, 0.5, 0.2, -0.4, 0.9];
        let objective = |p: &Mlp| -> f64 {
            let (y, _) = p.forward(&x, &ts).unwrap();
            y.as_slice().iter().zip(weights).map(|(a, w)| a * w).sum()
        };
        let (_, cache) = m.forward(&x, &ts).unwrap();
        let grad = m.backward(&cache, &weights);
        let h = 1e-6;
        for k in 0..m.params().len() {
            let mut plus = m.clone();
            plus.params_mut()[k] += h;
            let mut minus = m.clone();
            minus.params_mut()[k] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-7 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn rejects_wrong_dimensions() {
        let m = tiny();
        assert!(m.predict(&SampleBatch::zeros(1, 3), 0).is_err());
        assert!(Mlp::from_params(m.shape().clone(), vec![0.0; 3]).is_err());
        assert!(Mlp::new(MlpShape { dim: 2, hidden: vec![4], time_dim: 3 }, &mut Streams::new(0).stream(Purpose::Init, 0)).is_err());
    }
}
