//! Canonical binary layout of a proposal.
//!
//! Fields appear in declaration order. Integers are big-endian and fixed
//! width, reals are IEEE-754 bit patterns (big-endian u64), strings are a
//! u16 length followed by UTF-8 bytes, optionals carry a one-byte presence
//! flag and sequences a length prefix. The first byte is a format version.

use std::collections::BTreeSet;

use super::schema::{FieldKind, OutputSchema, SchemaField};
use super::{
    ComputationId, ComputationProposal, DataMode, MapFnSpec, ProposalError, ReduceFnSpec,
    ThreatModel,
};

const FORMAT_VERSION: u8 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn len(&mut self, n: usize) -> Result<(), ProposalError> {
        let n =
            u16::try_from(n).map_err(|_| ProposalError::Malformed("sequence too long".into()))?;
        self.u16(n);
        Ok(())
    }
    fn str(&mut self, s: &str) -> Result<(), ProposalError> {
        self.len(s.len())?;
        self.buf.extend_from_slice(s.as_bytes());
        Ok(())
    }
    fn opt_str(&mut self, s: &Option<String>) -> Result<(), ProposalError> {
        match s {
            None => self.u8(0),
            Some(s) => {
                self.u8(1);
                self.str(s)?;
            }
        }
        Ok(())
    }
    fn f64s(&mut self, v: &[f64]) -> Result<(), ProposalError> {
        self.len(v.len())?;
        v.iter().for_each(|x| self.f64(*x));
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProposalError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| ProposalError::Malformed(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ProposalError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProposalError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, ProposalError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ProposalError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ProposalError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String, ProposalError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ProposalError::Malformed("invalid utf-8".into()))
    }
    fn flag(&mut self) -> Result<bool, ProposalError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(ProposalError::Malformed(format!("bad presence flag {b}"))),
        }
    }
    fn opt_str(&mut self) -> Result<Option<String>, ProposalError> {
        Ok(if self.flag()? {
            Some(self.str()?)
        } else {
            None
        })
    }
    fn f64s(&mut self) -> Result<Vec<f64>, ProposalError> {
        let n = self.u16()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }
}

fn bad_tag(what: &str, tag: u8) -> ProposalError {
    ProposalError::Malformed(format!("unknown {what} tag {tag}"))
}

fn write_map(w: &mut Writer, m: &MapFnSpec) -> Result<(), ProposalError> {
    match m {
        MapFnSpec::MeanOf { field } => {
            w.u8(0);
            w.str(field)?;
        }
        MapFnSpec::Count => w.u8(1),
        MapFnSpec::SumOf { field } => {
            w.u8(2);
            w.str(field)?;
        }
        MapFnSpec::HistogramOf { field, bin_edges } => {
            w.u8(3);
            w.str(field)?;
            w.f64s(bin_edges)?;
        }
        MapFnSpec::RollingMean { field, window } => {
            w.u8(4);
            w.str(field)?;
            w.u32(*window);
        }
        MapFnSpec::LogprobVector {
            item_id,
            count,
            choices,
        } => {
            w.u8(5);
            w.u64(*item_id);
            w.u32(*count);
            w.u32(*choices);
        }
    }
    Ok(())
}

fn read_map(r: &mut Reader) -> Result<MapFnSpec, ProposalError> {
    Ok(match r.u8()? {
        0 => MapFnSpec::MeanOf { field: r.str()? },
        1 => MapFnSpec::Count,
        2 => MapFnSpec::SumOf { field: r.str()? },
        3 => MapFnSpec::HistogramOf {
            field: r.str()?,
            bin_edges: r.f64s()?,
        },
        4 => MapFnSpec::RollingMean {
            field: r.str()?,
            window: r.u32()?,
        },
        5 => MapFnSpec::LogprobVector {
            item_id: r.u64()?,
            count: r.u32()?,
            choices: r.u32()?,
        },
        t => return Err(bad_tag("map function", t)),
    })
}

fn write_schema(w: &mut Writer, s: &OutputSchema) -> Result<(), ProposalError> {
    w.len(s.fields.len())?;
    for f in &s.fields {
        w.str(&f.name)?;
        match &f.kind {
            FieldKind::Fixed64 => w.u8(0),
            FieldKind::Count => w.u8(1),
            FieldKind::Fixed64Vector { length } => {
                w.u8(2);
                w.u32(*length);
            }
            FieldKind::Histogram { bin_edges } => {
                w.u8(3);
                w.f64s(bin_edges)?;
            }
        }
    }
    Ok(())
}

fn read_schema(r: &mut Reader) -> Result<OutputSchema, ProposalError> {
    let n = r.u16()? as usize;
    let mut fields = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let kind = match r.u8()? {
            0 => FieldKind::Fixed64,
            1 => FieldKind::Count,
            2 => FieldKind::Fixed64Vector { length: r.u32()? },
            3 => FieldKind::Histogram {
                bin_edges: r.f64s()?,
            },
            t => return Err(bad_tag("field kind", t)),
        };
        fields.push(SchemaField { name, kind });
    }
    Ok(OutputSchema { fields })
}

fn write_reduce(w: &mut Writer, s: &ReduceFnSpec) -> Result<(), ProposalError> {
    match s {
        ReduceFnSpec::Sum => w.u8(0),
        ReduceFnSpec::Mean => w.u8(1),
        ReduceFnSpec::HistogramMerge => w.u8(2),
        ReduceFnSpec::Gini => w.u8(3),
        ReduceFnSpec::TopDecileShare => w.u8(4),
        ReduceFnSpec::GacEnsemble { weights } => {
            w.u8(5);
            w.f64s(weights)?;
        }
        ReduceFnSpec::TheoMax => w.u8(6),
    }
    Ok(())
}

fn read_reduce(r: &mut Reader) -> Result<ReduceFnSpec, ProposalError> {
    Ok(match r.u8()? {
        0 => ReduceFnSpec::Sum,
        1 => ReduceFnSpec::Mean,
        2 => ReduceFnSpec::HistogramMerge,
        3 => ReduceFnSpec::Gini,
        4 => ReduceFnSpec::TopDecileShare,
        5 => ReduceFnSpec::GacEnsemble { weights: r.f64s()? },
        6 => ReduceFnSpec::TheoMax,
        t => return Err(bad_tag("reduce function", t)),
    })
}

fn write_threat(w: &mut Writer, t: &ThreatModel) {
    match t {
        ThreatModel::SemiHonest3PC => w.u8(0),
        ThreatModel::ShamirThreshold { t, n } => {
            w.u8(1);
            w.u32(*t);
            w.u32(*n);
        }
        ThreatModel::AdditiveHE => w.u8(2),
        ThreatModel::PlaintextDP => w.u8(3),
        ThreatModel::TEEStub => w.u8(4),
    }
}

fn read_threat(r: &mut Reader) -> Result<ThreatModel, ProposalError> {
    Ok(match r.u8()? {
        0 => ThreatModel::SemiHonest3PC,
        1 => ThreatModel::ShamirThreshold {
            t: r.u32()?,
            n: r.u32()?,
        },
        2 => ThreatModel::AdditiveHE,
        3 => ThreatModel::PlaintextDP,
        4 => ThreatModel::TEEStub,
        t => return Err(bad_tag("threat model", t)),
    })
}

/// Deterministic byte encoding used as the signed message.
pub fn canonical_serialize(p: &ComputationProposal) -> Result<Vec<u8>, ProposalError> {
    p.validate()?;
    let mut w = Writer::default();
    w.u8(FORMAT_VERSION);
    w.buf.extend_from_slice(&p.id.0);
    w.u64(p.deadline);
    w.u32(p.min_participants);
    w.u64(p.budget);
    w.len(p.targets.len())?;
    p.targets.iter().for_each(|t| w.u32(*t));
    write_map(&mut w, &p.map_spec)?;
    w.opt_str(&p.map_post)?;
    write_schema(&mut w, &p.output_schema)?;
    write_reduce(&mut w, &p.reduce_spec)?;
    w.opt_str(&p.reduce_post)?;
    write_threat(&mut w, &p.threat_model);
    w.buf.extend_from_slice(&p.proposer);
    match p.epsilon {
        None => w.u8(0),
        Some(e) => {
            w.u8(1);
            w.f64(e);
        }
    }
    w.u8(match p.mode {
        DataMode::Real => 0,
        DataMode::Mock => 1,
    });
    w.len(p.quorum.len())?;
    p.quorum.iter().for_each(|q| w.u32(*q));
    Ok(w.buf)
}

/// Inverse of [`canonical_serialize`]. Rejects trailing bytes, non-canonical
/// target ordering and proposals that fail validation.
pub fn canonical_deserialize(bytes: &[u8]) -> Result<ComputationProposal, ProposalError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(ProposalError::Malformed(format!(
            "unsupported version {version}"
        )));
    }
    let id = ComputationId(r.take(16)?.try_into().unwrap());
    let deadline = r.u64()?;
    let min_participants = r.u32()?;
    let budget = r.u64()?;
    let n_targets = r.u16()? as usize;
    let target_list = (0..n_targets)
        .map(|_| r.u32())
        .collect::<Result<Vec<_>, _>>()?;
    if target_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProposalError::Malformed(
            "targets not in canonical order".into(),
        ));
    }
    let targets: BTreeSet<u32> = target_list.into_iter().collect();
    let map_spec = read_map(&mut r)?;
    let map_post = r.opt_str()?;
    let output_schema = read_schema(&mut r)?;
    let reduce_spec = read_reduce(&mut r)?;
    let reduce_post = r.opt_str()?;
    let threat_model = read_threat(&mut r)?;
    let proposer: [u8; 32] = r.take(32)?.try_into().unwrap();
    let epsilon = if r.flag()? { Some(r.f64()?) } else { None };
    let mode = match r.u8()? {
        0 => DataMode::Real,
        1 => DataMode::Mock,
        t => return Err(bad_tag("mode", t)),
    };
    let n_quorum = r.u16()? as usize;
    let quorum = (0..n_quorum)
        .map(|_| r.u32())
        .collect::<Result<Vec<_>, _>>()?;
    if r.pos != bytes.len() {
        return Err(ProposalError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let p = ComputationProposal {
        id,
        deadline,
        min_participants,
        budget,
        targets,
        map_spec,
        map_post,
        output_schema,
        reduce_spec,
        reduce_post,
        threat_model,
        proposer,
        epsilon,
        mode,
        quorum,
    };
    p.validate()?;
    Ok(p)
}
