use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

/// `n` samples of dimension `d`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl SampleBatch {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Dimension(format!("empty batch ({n} x {d})")));
        }
        if data.len() != n * d {
            return Err(Error::Dimension(format!(
                "expected {} values for {n} x {d}, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Dimension(format!("non-finite entry at flat index {i}")));
        }
        Ok(Self { n, d, data })
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        assert!(n > 0 && d > 0, "empty batch");
        Self { n, d, data: vec![0.0; n * d] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), d, rows.concat())
    }

    pub fn standard_normal<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        let mut out = Self::zeros(n, d);
        rng::fill_normal(rng, &mut out.data);
        out
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { n: idx.len(), d: self.d, data }
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.n != other.n || self.d != other.d {
            return Err(Error::Dimension(format!(
                "shape {}x{} vs {}x{}",
                self.n, self.d, other.n, other.d
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean over rows of the per-row Euclidean norm.
    pub fn mean_norm(&self) -> f64 {
        self.rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / self.n as f64
    }
}
