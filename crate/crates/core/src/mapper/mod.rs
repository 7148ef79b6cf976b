//! Private map: local execution of a registered function over a node's own
//! dataset, followed by optional Laplace noise, clamping and fixed-point
//! encoding into a schema-checked [`MapOutput`].

mod dataset;
mod fixed;
mod laplace;
mod mock;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::proposal::{ComputationId, FieldKind, MapFnSpec, OutputSchema};

pub use dataset::{LocalDataset, Provenance};
pub use fixed::{decode_fixed, encode_fixed, FixedPoint, FRAC_BITS, MAX_ABS, SCALE};
pub use laplace::{apply_laplace, sample_laplace};
pub use mock::{derive_mock, MockMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("missing field `{0}`")]
    MissingField(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no record for item {0}")]
    MissingItem(u64),
    #[error("field `{0}` has no declared bounds; sensitivity is undefined")]
    MissingBounds(String),
    #[error("epsilon must be a positive finite real, got {0}")]
    InvalidEpsilon(f64),
    #[error("sensitivity must be a positive finite real, got {0}")]
    InvalidSensitivity(f64),
    #[error("value {0} is outside the fixed-point range")]
    OutOfRange(f64),
    #[error("mock sample size {requested} exceeds {available} records")]
    InvalidMockSize { requested: usize, available: usize },
    #[error("records disagree on field set")]
    InconsistentFields,
    #[error("dataset parse error: {0}")]
    Parse(String),
}

/// Unencoded result of a map function. Counts are integral until noise is added.
#[derive(Debug, Clone, PartialEq)]
pub enum MapValue {
    Scalar(f64),
    Count(f64),
    Vector(Vec<f64>),
    Histogram(Vec<f64>),
}

impl MapValue {
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            MapValue::Scalar(v) | MapValue::Count(v) => f(v),
            MapValue::Vector(v) | MapValue::Histogram(v) => v.iter_mut().for_each(f),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        match self {
            MapValue::Scalar(v) | MapValue::Count(v) => vec![*v],
            MapValue::Vector(v) | MapValue::Histogram(v) => v.clone(),
        }
    }
}

/// Encoded field value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputValue {
    Fixed(FixedPoint),
    Count(i64),
    Vector(Vec<FixedPoint>),
    Histogram(Vec<i64>),
}

impl OutputValue {
    fn push_words(&self, out: &mut Vec<u64>) {
        match self {
            OutputValue::Fixed(f) => out.push(f.raw()),
            OutputValue::Count(c) => out.push(*c as u64),
            OutputValue::Vector(v) => out.extend(v.iter().map(|f| f.raw())),
            OutputValue::Histogram(h) => out.extend(h.iter().map(|c| *c as u64)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MapOutput {
    pub computation_id: ComputationId,
    pub values: BTreeMap<String, OutputValue>,
}

impl MapOutput {
    /// Flattens to 64-bit words in schema field order: the ring elements
    /// that get shared or encrypted. Fields missing from `self` are skipped,
    /// so validate first.
    pub fn to_words(&self, schema: &OutputSchema) -> Vec<u64> {
        let mut out = Vec::with_capacity(schema.width());
        for f in &schema.fields {
            if let Some(v) = self.values.get(&f.name) {
                v.push_words(&mut out);
            }
        }
        out
    }
}

/// Encodes a (possibly noised) map value under `field` as the schema kind
/// demands. Integer kinds are rounded half-to-even.
pub fn encode_output(
    id: ComputationId,
    field: &str,
    kind: &FieldKind,
    value: &MapValue,
) -> Result<MapOutput, MapError> {
    let round_count = |v: f64| -> Result<i64, MapError> {
        if !v.is_finite() || v.abs() >= MAX_ABS {
            return Err(MapError::OutOfRange(v));
        }
        Ok(v.round_ties_even() as i64)
    };
    let encoded = match (kind, value) {
        (FieldKind::Fixed64, MapValue::Scalar(v) | MapValue::Count(v)) => {
            OutputValue::Fixed(encode_fixed(*v)?)
        }
        (FieldKind::Count, MapValue::Count(v) | MapValue::Scalar(v)) => {
            OutputValue::Count(round_count(*v)?)
        }
        (FieldKind::Fixed64Vector { .. }, MapValue::Vector(v) | MapValue::Histogram(v)) => {
            OutputValue::Vector(
                v.iter()
                    .map(|x| encode_fixed(*x))
                    .collect::<Result<_, _>>()?,
            )
        }
        (FieldKind::Histogram { .. }, MapValue::Histogram(v) | MapValue::Vector(v)) => {
            OutputValue::Histogram(
                v.iter()
                    .map(|x| round_count(*x))
                    .collect::<Result<_, _>>()?,
            )
        }
        // Shape mismatches are left for schema validation to report.
        (_, MapValue::Scalar(v)) => OutputValue::Fixed(encode_fixed(*v)?),
        (_, MapValue::Count(v)) => OutputValue::Count(round_count(*v)?),
        (_, MapValue::Vector(v)) => OutputValue::Vector(
            v.iter()
                .map(|x| encode_fixed(*x))
                .collect::<Result<_, _>>()?,
        ),
        (_, MapValue::Histogram(v)) => OutputValue::Histogram(
            v.iter()
                .map(|x| round_count(*x))
                .collect::<Result<_, _>>()?,
        ),
    };
    Ok(MapOutput {
        computation_id: id,
        values: [(field.to_string(), encoded)].into_iter().collect(),
    })
}

/// Mean of the trailing `window` values at every position, oldest first.
/// Positions before a full window use all values seen so far.
pub fn rolling_means(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn histogram(values: impl Iterator<Item = f64>, edges: &[f64]) -> Vec<f64> {
    let bins = edges.len() - 1;
    let mut counts = vec![0.0; bins];
    let last = edges[bins];
    for v in values {
        if v < edges[0] || v > last {
            continue;
        }
        let idx = if v == last {
            bins - 1
        } else {
            edges.partition_point(|e| *e <= v) - 1
        };
        counts[idx] += 1.0;
    }
    counts
}

/// Runs `spec` over `ds`. Pure: the same dataset and spec always give the
/// same value. Fields with declared bounds are clamped to them first.
pub fn execute_map(ds: &LocalDataset, spec: &MapFnSpec) -> Result<MapValue, MapError> {
    if ds.is_empty() {
        return Err(MapError::EmptyDataset);
    }
    match spec {
        MapFnSpec::Count => Ok(MapValue::Count(ds.len() as f64)),
        MapFnSpec::MeanOf { field } => {
            let col = ds.bounded_column(field)?;
            Ok(MapValue::Scalar(col.iter().sum::<f64>() / col.len() as f64))
        }
        MapFnSpec::SumOf { field } => Ok(MapValue::Scalar(ds.bounded_column(field)?.iter().sum())),
        MapFnSpec::HistogramOf { field, bin_edges } => Ok(MapValue::Histogram(histogram(
            ds.column(field)?.into_iter(),
            bin_edges,
        ))),
        MapFnSpec::RollingMean { field, window } => {
            let col = ds.bounded_column(field)?;
            let series = rolling_means(&col, *window as usize);
            Ok(MapValue::Scalar(*series.last().expect("non-empty")))
        }
        MapFnSpec::LogprobVector {
            item_id,
            count,
            choices,
        } => {
            let items = ds.column("item")?;
            let cols = (0..*choices)
                .map(|c| ds.column(&format!("lp{c}")))
                .collect::<Result<Vec<_>, _>>()?;
            let mut out = Vec::with_capacity((*count * *choices) as usize);
            for item in *item_id..*item_id + *count as u64 {
                let row = items
                    .iter()
                    .position(|v| *v == item as f64)
                    .ok_or(MapError::MissingItem(item))?;
                out.extend(cols.iter().map(|c| c[row]));
            }
            Ok(MapValue::Vector(out))
        }
    }
}

/// Static L1 sensitivity of each registry function on `ds`, used to scale
/// Laplace noise. Mean-like functions need declared field bounds.
pub fn sensitivity(ds: &LocalDataset, spec: &MapFnSpec) -> Result<f64, MapError> {
    let range = |field: &str| {
        ds.bounds(field)
            .ok_or_else(|| MapError::MissingBounds(field.to_string()))
    };
    match spec {
        MapFnSpec::Count | MapFnSpec::HistogramOf { .. } => Ok(1.0),
        MapFnSpec::MeanOf { field } => {
            let (lo, hi) = range(field)?;
            Ok((hi - lo) / ds.len().max(1) as f64)
        }
        MapFnSpec::SumOf { field } => {
            let (lo, hi) = range(field)?;
            Ok(lo.abs().max(hi.abs()))
        }
        MapFnSpec::RollingMean { field, window } => {
            let (lo, hi) = range(field)?;
            Ok((hi - lo) / (*window as usize).min(ds.len()).max(1) as f64)
        }
        MapFnSpec::LogprobVector { .. } => {
            let (lo, hi) = range("logprob")?;
            Ok(hi - lo)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scores(v: &[f64]) -> LocalDataset {
        LocalDataset::from_columns(
            vec!["score".into()],
            v.iter().map(|x| vec![*x]).collect(),
            Provenance::Real,
        )
        .unwrap()
    }

    #[test]
    fn two_point_mean() {
        let ds = scores(&[80.0, 90.0]);
        let v = execute_map(
            &ds,
            &MapFnSpec::MeanOf {
                field: "score".into(),
            },
        )
        .unwrap();
        assert_eq!(v, MapValue::Scalar(85.0));
    }

    #[test]
    fn count_thousand() {
        let ds = scores(&vec![1.0; 1000]);
        assert_eq!(
            execute_map(&ds, &MapFnSpec::Count).unwrap(),
            MapValue::Count(1000.0)
        );
    }

    #[test]
    fn missing_field_and_empty() {
        let ds = scores(&[1.0]);
        assert_eq!(
            execute_map(&ds, &MapFnSpec::SumOf { field: "x".into() }),
            Err(MapError::MissingField("x".into()))
        );
        let empty = scores(&[]);
        assert_eq!(
            execute_map(&empty, &MapFnSpec::Count),
            Err(MapError::EmptyDataset)
        );
    }

    #[test]
    fn histogram_bins_are_half_open_except_last() {
        let ds = scores(&[0.0, 0.5, 1.0, 2.0, 3.0, -1.0, 3.5]);
        let v = execute_map(
            &ds,
            &MapFnSpec::HistogramOf {
                field: "score".into(),
                bin_edges: vec![0.0, 1.0, 2.0, 3.0],
            },
        )
        .unwrap();
        assert_eq!(v, MapValue::Histogram(vec![2.0, 1.0, 2.0]));
    }

    fn naive_window_mean(v: &[f64], end: usize, w: usize) -> f64 {
        let start = (end + 1).saturating_sub(w);
        let mut s = 0.0;
        for x in &v[start..=end] {
            s += x;
        }
        s / (end + 1 - start) as f64
    }

    #[test]
    fn rolling_mean_over_a_year_matches_naive_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let days: Vec<f64> = (0..500).map(|_| rng.gen_range(50..=100) as f64).collect();
        let series = rolling_means(&days, 365);
        for (i, m) in series.iter().enumerate() {
            assert!((m - naive_window_mean(&days, i, 365)).abs() < 1e-9);
        }
        let ds = scores(&days);
        let v = execute_map(
            &ds,
            &MapFnSpec::RollingMean {
                field: "score".into(),
                window: 365,
            },
        )
        .unwrap();
        assert_eq!(v, MapValue::Scalar(series[499]));
    }

    #[test]
    fn bounds_clamp_inputs_and_define_sensitivity() {
        let mut ds = scores(&[150.0, 50.0]);
        ds.set_bounds("score", 0.0, 100.0);
        let mean = MapFnSpec::MeanOf {
            field: "score".into(),
        };
        assert_eq!(execute_map(&ds, &mean).unwrap(), MapValue::Scalar(75.0));
        assert_eq!(sensitivity(&ds, &mean).unwrap(), 50.0);
        assert_eq!(sensitivity(&ds, &MapFnSpec::Count).unwrap(), 1.0);
        assert!(matches!(
            sensitivity(&scores(&[1.0]), &mean),
            Err(MapError::MissingBounds(_))
        ));
    }

    #[test]
    fn logprob_rows_in_item_order() {
        let ds = LocalDataset::from_columns(
            vec!["item".into(), "lp0".into(), "lp1".into()],
            vec![vec![1.0, -0.5, -1.0], vec![0.0, -2.0, -0.1]],
            Provenance::Real,
        )
        .unwrap();
        let v = execute_map(
            &ds,
            &MapFnSpec::LogprobVector {
                item_id: 0,
                count: 2,
                choices: 2,
            },
        )
        .unwrap();
        assert_eq!(v, MapValue::Vector(vec![-2.0, -0.1, -0.5, -1.0]));
        assert_eq!(
            execute_map(
                &ds,
                &MapFnSpec::LogprobVector {
                    item_id: 1,
                    count: 2,
                    choices: 2
                }
            ),
            Err(MapError::MissingItem(2))
        );
    }

    #[test]
    fn encode_output_rounds_counts() {
        let out = encode_output(
            ComputationId::default(),
            "h",
            &FieldKind::Histogram {
                bin_edges: vec![0.0, 1.0, 2.0],
            },
            &MapValue::Histogram(vec![2.5, -0.7]),
        )
        .unwrap();
        assert_eq!(out.values["h"], OutputValue::Histogram(vec![2, -1]));
        let schema = OutputSchema {
            fields: vec![crate::proposal::SchemaField {
                name: "h".into(),
                kind: FieldKind::Histogram {
                    bin_edges: vec![0.0, 1.0, 2.0],
                },
            }],
        };
        assert_eq!(out.to_words(&schema), vec![2, u64::MAX]);
    }

    proptest! {
        #[test]
        fn execute_map_is_referentially_transparent(v in proptest::collection::vec(0.0f64..100.0, 1..50), w in 1u32..20) {
            let ds = scores(&v);
            let spec = MapFnSpec::RollingMean { field: "score".into(), window: w };
            prop_assert_eq!(execute_map(&ds, &spec).unwrap(), execute_map(&ds.clone(), &spec).unwrap());
        }
    }
}
