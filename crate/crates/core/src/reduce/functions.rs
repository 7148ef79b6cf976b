//! Reduce functions over reconstructed aggregates, plus their plaintext
//! reference forms.

use serde::{Deserialize, Serialize};

use super::ReduceError;
use crate::mapper::FRAC_BITS;
use crate::proposal::{Clamp, FieldKind, ReduceFnSpec};

/// Gini coefficient, Σ_i Σ_j |x_i - x_j| / (2 n² μ), computed from the
/// sorted values in O(n log n).
pub fn gini(values: &[f64]) -> Result<f64, ReduceError> {
    if values.is_empty() {
        return Err(ReduceError::Empty);
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(ReduceError::NegativeValue);
    }
    let n = values.len() as f64;
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(ReduceError::ZeroMean);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Σ_i Σ_j |x_i - x_j| = 2 Σ_k (2k - n - 1) x_(k), k = 1..n
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| (2.0 * (k as f64 + 1.0) - n - 1.0) * x)
        .sum();
    let mean = total / n;
    Ok(2.0 * weighted / (2.0 * n * n * mean))
}

/// Share of the total held by the ⌈n/10⌉ largest values.
pub fn top_decile_share(values: &[f64]) -> Result<f64, ReduceError> {
    if values.is_empty() {
        return Err(ReduceError::Empty);
    }
    let total: f64 = values.iter().sum();
    if total <= 0.0 {
        return Err(ReduceError::ZeroTotal);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    // ceil(0.1 n) in integers, avoiding 0.1 * 10 rounding surprises
    let k = values.len().div_ceil(10);
    Ok(sorted[..k].iter().sum::<f64>() / total)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax_lowest(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in row.iter().enumerate() {
        if best.is_none_or(|b| *v > row[b]) {
            best = Some(i);
        }
    }
    best
}

/// Weighted log-probability ensemble for one question: argmax over choices
/// of Σ_m w_m logprob[m][c] with weights normalised to sum to one.
pub fn gac_ensemble(logprobs: &[Vec<f64>], weights: &[f64]) -> Result<usize, ReduceError> {
    if logprobs.is_empty() || logprobs[0].is_empty() || logprobs.len() != weights.len() {
        return Err(ReduceError::DimensionMismatch);
    }
    let choices = logprobs[0].len();
    if logprobs
        .iter()
        .any(|r| r.len() != choices || r.iter().any(|v| !v.is_finite()))
    {
        return Err(ReduceError::DimensionMismatch);
    }
    if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(ReduceError::InvalidWeights);
    }
    let wsum: f64 = weights.iter().sum();
    let scores: Vec<f64> = (0..choices)
        .map(|c| {
            logprobs
                .iter()
                .zip(weights)
                .map(|(row, w)| w / wsum * row[c])
                .sum()
        })
        .collect();
    Ok(argmax_lowest(&scores).expect("non-empty"))
}

/// Fraction of questions answered correctly by at least one model.
pub fn theoretical_max(correct: &[Vec<bool>]) -> Result<f64, ReduceError> {
    if correct.is_empty() {
        return Err(ReduceError::Empty);
    }
    let hits = correct.iter().filter(|row| row.iter().any(|c| *c)).count();
    Ok(hits as f64 / correct.len() as f64)
}

/// Result released for one computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum ReduceOutput {
    Scalar(f64),
    Vector(Vec<f64>),
    /// One chosen index per item (ensemble answers).
    Choices(Vec<u32>),
}

impl ReduceOutput {
    pub fn apply_clamp(&mut self, clamp: &Clamp) {
        match self {
            ReduceOutput::Scalar(v) => *v = clamp.apply(*v),
            ReduceOutput::Vector(vs) => vs.iter_mut().for_each(|v| *v = clamp.apply(*v)),
            ReduceOutput::Choices(_) => {}
        }
    }

    pub fn as_scalar(&self) -> Option<f64> {
        match self {
            ReduceOutput::Scalar(v) => Some(*v),
            _ => None,
        }
    }
}

/// Number of fractional bits the reconstructed words carry: fixed-point
/// kinds carry 16, integer kinds none, and the ensemble adds another 16
/// from its quantised weights.
pub fn aggregate_frac_bits(spec: &ReduceFnSpec, kind: &FieldKind) -> u32 {
    let base = match kind {
        FieldKind::Fixed64 | FieldKind::Fixed64Vector { .. } => FRAC_BITS,
        FieldKind::Count | FieldKind::Histogram { .. } => 0,
    };
    match spec {
        ReduceFnSpec::GacEnsemble { .. } => base + FRAC_BITS,
        _ => base,
    }
}

/// Applies `spec` to the reconstructed element-wise sum of all
/// contributions. `choices` is the row width for the ensemble.
pub fn apply_reduce(
    spec: &ReduceFnSpec,
    kind: &FieldKind,
    aggregate: &[i128],
    participants: u64,
    choices: usize,
) -> Result<ReduceOutput, ReduceError> {
    if aggregate.is_empty() {
        return Err(ReduceError::Empty);
    }
    let scale = (2f64).powi(aggregate_frac_bits(spec, kind) as i32);
    let values: Vec<f64> = aggregate.iter().map(|w| *w as f64 / scale).collect();
    let shaped = |v: Vec<f64>| {
        if v.len() == 1 && matches!(kind, FieldKind::Fixed64 | FieldKind::Count) {
            ReduceOutput::Scalar(v[0])
        } else {
            ReduceOutput::Vector(v)
        }
    };
    Ok(match spec {
        ReduceFnSpec::Sum | ReduceFnSpec::HistogramMerge => shaped(values),
        ReduceFnSpec::Mean => {
            if participants == 0 {
                return Err(ReduceError::Empty);
            }
            shaped(values.iter().map(|v| v / participants as f64).collect())
        }
        ReduceFnSpec::Gini => ReduceOutput::Scalar(gini(&values)?),
        ReduceFnSpec::TopDecileShare => ReduceOutput::Scalar(top_decile_share(&values)?),
        ReduceFnSpec::GacEnsemble { .. } => {
            if choices == 0 || !aggregate.len().is_multiple_of(choices) {
                return Err(ReduceError::DimensionMismatch);
            }
            // Integer comparison keeps the argmax exact.
            ReduceOutput::Choices(
                aggregate
                    .chunks(choices)
                    .map(|row| {
                        let mut best = 0;
                        for (i, v) in row.iter().enumerate() {
                            if *v > row[best] {
                                best = i;
                            }
                        }
                        best as u32
                    })
                    .collect(),
            )
        }
        ReduceFnSpec::TheoMax => {
            let hits = values.iter().filter(|v| **v > 0.0).count();
            ReduceOutput::Scalar(hits as f64 / values.len() as f64)
        }
    })
}
