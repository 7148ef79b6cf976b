//! Descriptive statistics for reports and audit analytics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("no values")]
    Empty,
    #[error("observed has {observed} categories, baseline has {baseline}")]
    CategoryMismatch { observed: usize, baseline: usize },
    #[error("baseline proportion of category {0} is zero")]
    ZeroBaseline(usize),
    #[error("baseline proportions sum to {0}, not 1")]
    BaselineNotNormalized(f64),
    #[error("observed counts sum to zero")]
    ZeroTotal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean: f64,
    /// Lower of the two middle values for even `n`.
    pub median: f64,
    /// Nearest-rank 95th percentile.
    pub p95: f64,
    pub min: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<SummaryStats, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(SummaryStats {
        n,
        mean: sorted.iter().sum::<f64>() / n as f64,
        median: sorted[(n - 1) / 2],
        p95: sorted[rank - 1],
        min: sorted[0],
        max: sorted[n - 1],
    })
}

/// `(observed_c / total) / baseline_c` per category.
pub fn representation_ratio(observed: &[f64], baseline: &[f64]) -> Result<Vec<f64>, StatsError> {
    if observed.len() != baseline.len() {
        return Err(StatsError::CategoryMismatch {
            observed: observed.len(),
            baseline: baseline.len(),
        });
    }
    if let Some(i) = baseline.iter().position(|b| *b <= 0.0) {
        return Err(StatsError::ZeroBaseline(i));
    }
    let bsum: f64 = baseline.iter().sum();
    if (bsum - 1.0).abs() > 1e-9 {
        return Err(StatsError::BaselineNotNormalized(bsum));
    }
    let total: f64 = observed.iter().sum();
    if total == 0.0 {
        return Err(StatsError::ZeroTotal);
    }
    Ok(observed
        .iter()
        .zip(baseline)
        .map(|(o, b)| (o / total) / b)
        .collect())
}
