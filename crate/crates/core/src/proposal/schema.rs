use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{MapOutput, OutputValue};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldKind {
    Fixed64,
    Count,
    Fixed64Vector {
        length: u32,
    },
    /// `bin_edges.len() - 1` counts; the last bin includes its right edge.
    Histogram {
        bin_edges: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    #[serde(flatten)]
    pub kind: FieldKind,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutputSchema {
    pub fields: Vec<SchemaField>,
}

/// The first field that does not conform to the schema.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("schema violation at field `{0}`")]
pub struct SchemaViolation(pub String);

pub(crate) fn check_bin_edges(edges: &[f64]) -> Result<(), String> {
    if edges.len() < 2 {
        return Err("histogram needs at least two bin edges".into());
    }
    if edges.iter().any(|e| !e.is_finite()) {
        return Err("bin edges must be finite".into());
    }
    if edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err("bin edges must be strictly increasing".into());
    }
    Ok(())
}

impl FieldKind {
    fn validate(&self) -> Result<(), String> {
        match self {
            FieldKind::Fixed64Vector { length: 0 } => Err("vector length must be >= 1".into()),
            FieldKind::Histogram { bin_edges } => check_bin_edges(bin_edges),
            _ => Ok(()),
        }
    }

    /// Number of 64-bit words a value of this kind occupies on the wire.
    pub fn width(&self) -> usize {
        match self {
            FieldKind::Fixed64 | FieldKind::Count => 1,
            FieldKind::Fixed64Vector { length } => *length as usize,
            FieldKind::Histogram { bin_edges } => bin_edges.len().saturating_sub(1),
        }
    }

    fn accepts(&self, value: &OutputValue) -> bool {
        match (self, value) {
            (FieldKind::Fixed64, OutputValue::Fixed(_)) => true,
            (FieldKind::Count, OutputValue::Count(_)) => true,
            (FieldKind::Fixed64Vector { length }, OutputValue::Vector(v)) => {
                v.len() == *length as usize
            }
            (FieldKind::Histogram { bin_edges }, OutputValue::Histogram(h)) => {
                h.len() + 1 == bin_edges.len()
            }
            _ => false,
        }
    }
}

impl OutputSchema {
    pub fn validate(&self) -> Result<(), String> {
        let mut seen = BTreeSet::new();
        for f in &self.fields {
            if f.name.is_empty() {
                return Err("empty field name".into());
            }
            if !seen.insert(f.name.as_str()) {
                return Err(format!("duplicate field `{}`", f.name));
            }
            f.kind
                .validate()
                .map_err(|e| format!("field `{}`: {e}", f.name))?;
        }
        Ok(())
    }

    /// Total wire words for one contribution.
    pub fn width(&self) -> usize {
        self.fields.iter().map(|f| f.kind.width()).sum()
    }
}

/// Accepts `value` iff it has exactly the schema's fields with matching
/// kinds and lengths. Missing or mismatched fields are reported in schema
/// order, then undeclared extras in name order.
pub fn validate_output(value: &MapOutput, schema: &OutputSchema) -> Result<(), SchemaViolation> {
    for field in &schema.fields {
        match value.values.get(&field.name) {
            Some(v) if field.kind.accepts(v) => {}
            _ => return Err(SchemaViolation(field.name.clone())),
        }
    }
    if let Some(extra) = value
        .values
        .keys()
        .find(|k| !schema.fields.iter().any(|f| &f.name == *k))
    {
        return Err(SchemaViolation(extra.clone()));
    }
    Ok(())
}
