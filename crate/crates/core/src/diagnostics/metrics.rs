//! Distribution distances used in place of FID.

use super::DiagnosticsTable;
use crate::batch::SampleBatch;
use crate::denoisers::Mixture;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use serde::{Deserialize, Serialize};

fn project(x: &SampleBatch, dir: &[f64]) -> Vec<f64> {
    let mut p: Vec<f64> = x.rows().map(|r| r.iter().zip(dir).map(|(a, b)| a * b).sum()).collect();
    p.sort_by(f64::total_cmp);
    p
}

/// 1-D W2 between sorted samples, integrating the quantile functions on a common grid.
fn w2_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        return (s / a.len() as f64).sqrt();
    }
    let m = a.len().max(b.len());
    let at = |s: &[f64], q: f64| s[((q * s.len() as f64) as usize).min(s.len() - 1)];
    let s: f64 = (0..m)
        .map(|k| {
            let q = (k as f64 + 0.5) / m as f64;
            (at(a, q) - at(b, q)).powi(2)
        })
        .sum();
    (s / m as f64).sqrt()
}

/// Mean over `n_proj` random unit directions of the 1-D Wasserstein-2 distance.
pub fn sliced_wasserstein(a: &SampleBatch, b: &SampleBatch, n_proj: usize, rng: &mut StreamRng) -> Result<f64> {
    if a.d() != b.d() {
        return Err(Error::Dimension(format!("batches of dim {} and {}", a.d(), b.d())));
    }
    if n_proj < 32 {
        return Err(Error::Config(format!("n_proj = {n_proj} must be >= 32")));
    }
    let d = a.d();
    let mut total = 0.0;
    let mut dir = vec![0.0; d];
    for _ in 0..n_proj {
        loop {
            rng::fill_normal(rng, &mut dir);
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                dir.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        total += w2_sorted(&project(a, &dir), &project(b, &dir));
    }
    Ok(total / n_proj as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentError {
    /// ‖mean(samples) − mean(reference)‖.
    pub mean_error: f64,
    /// Frobenius norm of the covariance difference.
    pub cov_error: f64,
}

impl MomentError {
    pub fn table(&self) -> DiagnosticsTable {
        let mut table = DiagnosticsTable::new();
        table.push("metrics", None, "mean_error", self.mean_error);
        table.push("metrics", None, "cov_error", self.cov_error);
        table
    }
}

/// Sample mean and covariance against the exact moments of `reference`.
pub fn moment_error(samples: &SampleBatch, reference: &Mixture) -> Result<MomentError> {
    let (n, d) = (samples.n(), samples.d());
    if n == 0 {
        return Err(Error::Dimension("no samples".into()));
    }
    if reference.dim() != d {
        return Err(Error::Dimension(format!("samples of dim {d} vs reference of dim {}", reference.dim())));
    }
    let mut mean = vec![0.0; d];
    for r in samples.rows() {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut cov = vec![0.0; d * d];
    let denom = n.saturating_sub(1).max(1) as f64;
    for r in samples.rows() {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / denom;
            }
        }
    }
    let ref_mean = reference.mean();
    let ref_cov = reference.covariance();
    let mean_error = mean.iter().zip(&ref_mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let cov_error = cov.iter().zip(&ref_cov).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(MomentError { mean_error, cov_error })
}
