//! Exposure-bias diagnostics and sample-quality metrics.

mod coupling;
mod density;
mod metrics;
mod mse;

pub use coupling::{coupling_matrix, CouplingCell, CouplingConfig, CouplingReport};
pub use density::{heterogeneous_data, variance_density, VarianceAtStep, VarianceDensity, VarianceSource, QUANTILES};
pub use metrics::{moment_error, sliced_wasserstein, MomentError};
pub use mse::{mse_by_step, MseConfig, MseCurve, MsePoint};

use crate::io::fmt17;
use serde::{Deserialize, Serialize};

/// One long-form diagnostics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub experiment: String,
    pub t: Option<usize>,
    pub stat: String,
    pub value: f64,
}

/// Append-only long-form table shared by all diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsTable {
    records: Vec<Record>,
}

impl DiagnosticsTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, experiment: &str, t: Option<usize>, stat: impl Into<String>, value: f64) {
        self.records.push(Record { experiment: experiment.to_string(), t, stat: stat.into(), value });
    }

    pub fn extend(&mut self, other: DiagnosticsTable) {
        self.records.extend(other.records);
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn get(&self, experiment: &str, t: Option<usize>, stat: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.experiment == experiment && r.t == t && r.stat == stat)
            .map(|r| r.value)
    }

    /// `experiment,t,stat,value`; `t` is empty for step-free records.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("experiment,t,stat,value\n");
        for r in &self.records {
            let t = r.t.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.experiment, t, r.stat, fmt17(r.value)));
        }
        out
    }
}

/// `name,value` CSV.
pub fn metrics_csv(metrics: &[(String, f64)]) -> String {
    let mut out = String::from("name,value\n");
    for (name, value) in metrics {
        out.push_str(&format!("{name},{}\n", fmt17(*value)));
    }
    out
}

/// Linear-interpolated empirical quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}
