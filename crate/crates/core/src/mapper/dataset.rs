use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::MapError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Real,
    Mock,
}

/// A node's local records. All records share one ordered field set; values
/// are reals (integers are stored exactly up to 2^53).
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDataset {
    fields: Vec<String>,
    rows: Vec<Vec<f64>>,
    provenance: Provenance,
    bounds: BTreeMap<String, (f64, f64)>,
}

impl LocalDataset {
    pub fn from_columns(
        fields: Vec<String>,
        rows: Vec<Vec<f64>>,
        provenance: Provenance,
    ) -> Result<Self, MapError> {
        if rows.iter().any(|r| r.len() != fields.len()) {
            return Err(MapError::InconsistentFields);
        }
        Ok(LocalDataset {
            fields,
            rows,
            provenance,
            bounds: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub(crate) fn with_provenance(mut self, p: Provenance) -> Self {
        self.provenance = p;
        self
    }

    /// Declares the public value range of `field`.
    pub fn set_bounds(&mut self, field: &str, lo: f64, hi: f64) {
        self.bounds.insert(field.to_string(), (lo, hi));
    }

    pub fn bounds(&self, field: &str) -> Option<(f64, f64)> {
        self.bounds.get(field).copied()
    }

    pub(crate) fn all_bounds(&self) -> &BTreeMap<String, (f64, f64)> {
        &self.bounds
    }

    fn index(&self, field: &str) -> Result<usize, MapError> {
        self.fields
            .iter()
            .position(|f| f == field)
            .ok_or_else(|| MapError::MissingField(field.to_string()))
    }

    pub fn column(&self, field: &str) -> Result<Vec<f64>, MapError> {
        let i = self.index(field)?;
        Ok(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Column values clamped to the declared bounds, if any.
    pub fn bounded_column(&self, field: &str) -> Result<Vec<f64>, MapError> {
        let col = self.column(field)?;
        Ok(match self.bounds(field) {
            Some((lo, hi)) => col.into_iter().map(|v| v.clamp(lo, hi)).collect(),
            None => col,
        })
    }

    /// Reads comma-separated values with a header row. A leading `index`
    /// column, if present, orders the records and is dropped.
    pub fn read_csv<R: Read>(reader: R, provenance: Provenance) -> Result<Self, MapError> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| MapError::Parse(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let indexed = headers
            .first()
            .is_some_and(|h| h.is_empty() || h.eq_ignore_ascii_case("index"));
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| MapError::Parse(e.to_string()))?;
            let vals = rec
                .iter()
                .map(|s| {
                    s.parse::<f64>().map_err(|_| {
                        MapError::Parse(format!("record {}: `{s}` is not numeric", line + 1))
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(vals);
        }
        let fields = if indexed {
            rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
            rows.iter_mut().for_each(|r| {
                r.remove(0);
            });
            headers[1..].to_vec()
        } else {
            headers
        };
        LocalDataset::from_columns(fields, rows, provenance)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), MapError> {
        let mut w = csv::Writer::from_writer(writer);
        let err = |e: csv::Error| MapError::Parse(e.to_string());
        w.write_record(std::iter::once("index").chain(self.fields.iter().map(String::as_str)))
            .map_err(err)?;
        for (i, r) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(r.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(err)?;
        }
        w.flush().map_err(|e| MapError::Parse(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_with_index_column_is_reordered() {
        let text = "index,score,day\n2,70,3\n0,50,1\n1,60,2\n";
        let ds = LocalDataset::read_csv(text.as_bytes(), Provenance::Real).unwrap();
        assert_eq!(ds.fields(), ["score", "day"]);
        assert_eq!(ds.column("score").unwrap(), vec![50.0, 60.0, 70.0]);
    }

    #[test]
    fn csv_roundtrip() {
        let ds = LocalDataset::from_columns(
            vec!["a".into(), "b".into()],
            vec![vec![1.5, -2.0], vec![3.0, 4.25]],
            Provenance::Mock,
        )
        .unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(
            LocalDataset::read_csv(buf.as_slice(), Provenance::Mock).unwrap(),
            ds
        );
    }

    #[test]
    fn non_numeric_and_ragged_rows_rejected() {
        assert!(LocalDataset::read_csv("a\nx\n".as_bytes(), Provenance::Real).is_err());
        assert_eq!(
            LocalDataset::from_columns(vec!["a".into()], vec![vec![1.0, 2.0]], Provenance::Real),
            Err(MapError::InconsistentFields)
        );
    }
}
