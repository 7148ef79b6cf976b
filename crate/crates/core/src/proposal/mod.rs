//! Computation proposals: the signed object that starts every computation.
//!
//! A proposal names the map function each light node runs locally, the
//! schema its output must satisfy, the reduce function the heavy quorum
//! applies, the participant threshold and deadline, and the threat model
//! that selects the aggregation backend.

mod authoring;
mod codec;
mod schema;
mod signing;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use authoring::{from_authoring_text, to_authoring_text};
pub use codec::{canonical_deserialize, canonical_serialize};
pub use schema::{validate_output, FieldKind, OutputSchema, SchemaField, SchemaViolation};
pub use signing::{
    decode_signed, encode_signed, sign_proposal, signing_key_from_seed, verify_proposal,
    SignedProposal, PUBLIC_KEY_LEN, SIGNATURE_LEN,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("invalid proposal: field `{field}`: {reason}")]
    InvalidProposal { field: &'static str, reason: String },
    #[error("malformed encoding: {0}")]
    Malformed(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl ProposalError {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ProposalError::InvalidProposal {
            field,
            reason: reason.into(),
        }
    }

    /// Name of the offending field for validation failures.
    pub fn field(&self) -> Option<&'static str> {
        match self {
            ProposalError::InvalidProposal { field, .. } => Some(field),
            _ => None,
        }
    }
}

/// 16-byte computation identifier, shared by every gossip copy of a proposal.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct ComputationId(pub [u8; 16]);

impl ComputationId {
    pub fn from_u128(v: u128) -> Self {
        ComputationId(v.to_be_bytes())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, ProposalError> {
        let bytes = hex::decode(s).map_err(|e| ProposalError::Parse(format!("id: {e}")))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| ProposalError::Parse("id must be 16 bytes".into()))?;
        Ok(ComputationId(arr))
    }
}

impl fmt::Debug for ComputationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComputationId({})", self.to_hex())
    }
}

impl fmt::Display for ComputationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for ComputationId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for ComputationId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ComputationId::from_hex(&s).map_err(serde::de::Error::custom)
    }
}

/// Registered map functions. The registry is closed: nodes never run
/// arbitrary code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum MapFnSpec {
    MeanOf {
        field: String,
    },
    Count,
    SumOf {
        field: String,
    },
    HistogramOf {
        field: String,
        bin_edges: Vec<f64>,
    },
    RollingMean {
        field: String,
        window: u32,
    },
    /// Log-probability rows for `count` consecutive items starting at
    /// `item_id`, `choices` entries each.
    LogprobVector {
        item_id: u64,
        count: u32,
        choices: u32,
    },
}

impl MapFnSpec {
    pub fn registry_name(&self) -> &'static str {
        match self {
            MapFnSpec::MeanOf { .. } => "mean_of",
            MapFnSpec::Count => "count",
            MapFnSpec::SumOf { .. } => "sum_of",
            MapFnSpec::HistogramOf { .. } => "histogram_of",
            MapFnSpec::RollingMean { .. } => "rolling_mean",
            MapFnSpec::LogprobVector { .. } => "logprob_vector",
        }
    }

    /// Shape of the value this function produces.
    pub fn output_kind(&self) -> FieldKind {
        match self {
            MapFnSpec::MeanOf { .. } | MapFnSpec::SumOf { .. } | MapFnSpec::RollingMean { .. } => {
                FieldKind::Fixed64
            }
            MapFnSpec::Count => FieldKind::Count,
            MapFnSpec::HistogramOf { bin_edges, .. } => FieldKind::Histogram {
                bin_edges: bin_edges.clone(),
            },
            MapFnSpec::LogprobVector { count, choices, .. } => FieldKind::Fixed64Vector {
                length: count.saturating_mul(*choices),
            },
        }
    }

    fn validate(&self) -> Result<(), ProposalError> {
        match self {
            MapFnSpec::MeanOf { field }
            | MapFnSpec::SumOf { field }
            | MapFnSpec::RollingMean { field, .. }
            | MapFnSpec::HistogramOf { field, .. }
                if field.is_empty() =>
            {
                Err(ProposalError::invalid("map_spec", "empty field name"))
            }
            MapFnSpec::RollingMean { window: 0, .. } => {
                Err(ProposalError::invalid("map_spec", "window must be >= 1"))
            }
            MapFnSpec::HistogramOf { bin_edges, .. } => schema::check_bin_edges(bin_edges)
                .map_err(|reason| ProposalError::invalid("map_spec", reason)),
            MapFnSpec::LogprobVector { count, choices, .. } => {
                if *count == 0 || *choices == 0 {
                    Err(ProposalError::invalid(
                        "map_spec",
                        "count and choices must be >= 1",
                    ))
                } else if count
                    .checked_mul(*choices)
                    .is_none_or(|n| n > u16::MAX as u32)
                {
                    Err(ProposalError::invalid(
                        "map_spec",
                        "logprob vector too long",
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Registered reduce functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ReduceFnSpec {
    Sum,
    Mean,
    HistogramMerge,
    Gini,
    TopDecileShare,
    /// Weighted log-probability ensemble. `weights[i]` belongs to the i-th
    /// smallest target index.
    GacEnsemble {
        weights: Vec<f64>,
    },
    TheoMax,
}

impl ReduceFnSpec {
    pub fn registry_name(&self) -> &'static str {
        match self {
            ReduceFnSpec::Sum => "sum",
            ReduceFnSpec::Mean => "mean",
            ReduceFnSpec::HistogramMerge => "histogram_merge",
            ReduceFnSpec::Gini => "gini",
            ReduceFnSpec::TopDecileShare => "top_decile_share",
            ReduceFnSpec::GacEnsemble { .. } => "gac_ensemble",
            ReduceFnSpec::TheoMax => "theo_max",
        }
    }

    /// Threat models under which this function can run. Comparison-based
    /// functions are evaluated after the aggregate inputs are reconstructed,
    /// so they share the linear functions' compatibility set.
    pub fn compatibility(&self) -> BTreeSet<ThreatModelKind> {
        use ThreatModelKind::*;
        match self {
            ReduceFnSpec::GacEnsemble { .. } => {
                [SemiHonest3PC, ShamirThreshold, AdditiveHE, TEEStub]
                    .into_iter()
                    .collect()
            }
            _ => [
                SemiHonest3PC,
                ShamirThreshold,
                AdditiveHE,
                PlaintextDP,
                TEEStub,
            ]
            .into_iter()
            .collect(),
        }
    }

    fn validate(&self) -> Result<(), ProposalError> {
        if let ReduceFnSpec::GacEnsemble { weights } = self {
            if weights.is_empty() {
                return Err(ProposalError::invalid("reduce_spec", "no weights"));
            }
            if weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
                return Err(ProposalError::invalid(
                    "reduce_spec",
                    "weights must be positive",
                ));
            }
        }
        Ok(())
    }
}

/// Declared adversarial assumption; selects the aggregation backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ThreatModel {
    #[serde(rename = "semi_honest_3pc")]
    SemiHonest3PC,
    ShamirThreshold {
        t: u32,
        n: u32,
    },
    #[serde(rename = "additive_he")]
    AdditiveHE,
    #[serde(rename = "plaintext_dp")]
    PlaintextDP,
    #[serde(rename = "tee_stub")]
    TEEStub,
}

/// Threat model variant without parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThreatModelKind {
    SemiHonest3PC,
    ShamirThreshold,
    AdditiveHE,
    PlaintextDP,
    TEEStub,
}

impl ThreatModel {
    pub fn kind(&self) -> ThreatModelKind {
        match self {
            ThreatModel::SemiHonest3PC => ThreatModelKind::SemiHonest3PC,
            ThreatModel::ShamirThreshold { .. } => ThreatModelKind::ShamirThreshold,
            ThreatModel::AdditiveHE => ThreatModelKind::AdditiveHE,
            ThreatModel::PlaintextDP => ThreatModelKind::PlaintextDP,
            ThreatModel::TEEStub => ThreatModelKind::TEEStub,
        }
    }

    /// Number of heavy nodes the backend needs, or `None` for the TEE stub.
    pub fn quorum_size(&self) -> Option<usize> {
        match self {
            ThreatModel::SemiHonest3PC => Some(3),
            ThreatModel::ShamirThreshold { n, .. } => Some(*n as usize),
            // aggregator + key holder
            ThreatModel::AdditiveHE => Some(2),
            ThreatModel::PlaintextDP => Some(1),
            ThreatModel::TEEStub => None,
        }
    }

    pub fn label(&self) -> String {
        match self {
            ThreatModel::SemiHonest3PC => "semi_honest_3pc".into(),
            ThreatModel::ShamirThreshold { t, n } => format!("shamir({t},{n})"),
            ThreatModel::AdditiveHE => "additive_he".into(),
            ThreatModel::PlaintextDP => "plaintext_dp".into(),
            ThreatModel::TEEStub => "tee_stub".into(),
        }
    }

    fn validate(&self) -> Result<(), ProposalError> {
        if let ThreatModel::ShamirThreshold { t, n } = self {
            if *t < 1 || t > n {
                return Err(ProposalError::invalid(
                    "threat_model",
                    "requires 1 <= t <= n",
                ));
            }
            if *n > u8::MAX as u32 {
                return Err(ProposalError::invalid(
                    "threat_model",
                    "n must fit one byte",
                ));
            }
        }
        Ok(())
    }
}

/// Which of a contributor's two datasets a computation runs against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    #[default]
    Real,
    Mock,
}

/// Optional post-processing step. Only range clamping is defined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clamp {
    pub lo: f64,
    pub hi: f64,
}

impl Clamp {
    /// Parses registry names of the form `clamp(lo,hi)`; `inf`/`-inf` allowed.
    pub fn parse(name: &str) -> Result<Clamp, String> {
        let inner = name
            .trim()
            .strip_prefix("clamp(")
            .and_then(|s| s.strip_suffix(')'))
            .ok_or_else(|| format!("unknown post-processing `{name}`"))?;
        let (lo, hi) = inner
            .split_once(',')
            .ok_or_else(|| format!("clamp needs two bounds: `{name}`"))?;
        let lo: f64 = lo
            .trim()
            .parse()
            .map_err(|_| format!("bad bound in `{name}`"))?;
        let hi: f64 = hi
            .trim()
            .parse()
            .map_err(|_| format!("bad bound in `{name}`"))?;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(format!("clamp bounds out of order in `{name}`"));
        }
        Ok(Clamp { lo, hi })
    }

    pub fn apply(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationProposal {
    pub id: ComputationId,
    /// Virtual-time tick after which shares are no longer collected.
    pub deadline: u64,
    pub min_participants: u32,
    /// Opaque economic units; carried, never settled.
    pub budget: u64,
    /// Targeted node indices; empty means open gossip.
    #[serde(default)]
    pub targets: BTreeSet<u32>,
    pub map_spec: MapFnSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_post: Option<String>,
    pub output_schema: OutputSchema,
    pub reduce_spec: ReduceFnSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_post: Option<String>,
    pub threat_model: ThreatModel,
    #[serde(with = "hex_key")]
    pub proposer: [u8; PUBLIC_KEY_LEN],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub mode: DataMode,
    /// Heavy-node indices executing the secure reduce, in party order.
    #[serde(default)]
    pub quorum: Vec<u32>,
}

mod hex_key {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &[u8; 32], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(k))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(d)?;
        let v = hex::decode(&s).map_err(serde::de::Error::custom)?;
        v.try_into()
            .map_err(|_| serde::de::Error::custom("proposer key must be 32 bytes"))
    }
}

impl ComputationProposal {
    /// Checks every structural invariant a proposal must satisfy before it
    /// can be encoded, signed or executed.
    pub fn validate(&self) -> Result<(), ProposalError> {
        if self.min_participants < 1 {
            return Err(ProposalError::invalid("min_participants", "must be >= 1"));
        }
        self.map_spec.validate()?;
        if let Some(post) = &self.map_post {
            Clamp::parse(post).map_err(|r| ProposalError::invalid("map_post", r))?;
        }
        self.output_schema
            .validate()
            .map_err(|r| ProposalError::invalid("output_schema", r))?;
        if self.output_schema.fields.len() != 1 {
            return Err(ProposalError::invalid(
                "output_schema",
                "exactly one field (the map function's output) is required",
            ));
        }
        if self.output_schema.fields[0].kind != self.map_spec.output_kind() {
            return Err(ProposalError::invalid(
                "output_schema",
                format!(
                    "field `{}` does not match the output of {}",
                    self.output_schema.fields[0].name,
                    self.map_spec.registry_name()
                ),
            ));
        }
        self.reduce_spec.validate()?;
        if let Some(post) = &self.reduce_post {
            Clamp::parse(post).map_err(|r| ProposalError::invalid("reduce_post", r))?;
        }
        self.threat_model.validate()?;
        if !self
            .reduce_spec
            .compatibility()
            .contains(&self.threat_model.kind())
        {
            return Err(ProposalError::invalid(
                "threat_model",
                format!(
                    "{} is not supported by reduce function {}",
                    self.threat_model.label(),
                    self.reduce_spec.registry_name()
                ),
            ));
        }
        if let Some(eps) = self.epsilon {
            if !eps.is_finite() || eps < 0.0 {
                return Err(ProposalError::invalid(
                    "epsilon",
                    "must be a finite real >= 0",
                ));
            }
        } else if self.threat_model == ThreatModel::PlaintextDP {
            return Err(ProposalError::invalid(
                "epsilon",
                "plaintext_dp contributions must be noised",
            ));
        }
        if let ReduceFnSpec::GacEnsemble { weights } = &self.reduce_spec {
            if weights.len() != self.targets.len() {
                return Err(ProposalError::invalid(
                    "reduce_spec",
                    "one ensemble weight per target is required",
                ));
            }
        }
        if let Some(q) = self.threat_model.quorum_size() {
            if self.quorum.len() != q {
                return Err(ProposalError::invalid(
                    "quorum",
                    format!("{} needs {q} heavy nodes", self.threat_model.label()),
                ));
            }
        }
        let distinct: BTreeSet<_> = self.quorum.iter().collect();
        if distinct.len() != self.quorum.len() {
            return Err(ProposalError::invalid("quorum", "duplicate heavy node"));
        }
        Ok(())
    }

    /// Index of `node` among the targets, which is also its ensemble weight slot.
    pub fn target_slot(&self, node: u32) -> Option<usize> {
        self.targets.iter().position(|t| *t == node)
    }

    pub fn map_clamp(&self) -> Option<Clamp> {
        self.map_post.as_deref().and_then(|p| Clamp::parse(p).ok())
    }

    pub fn reduce_clamp(&self) -> Option<Clamp> {
        self.reduce_post
            .as_deref()
            .and_then(|p| Clamp::parse(p).ok())
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn proposal() -> ComputationProposal {
        ComputationProposal {
            id: ComputationId::from_u128(0x0123_4567_89ab_cdef_0011_2233_4455_6677),
            deadline: 40,
            min_participants: 500,
            budget: 1_000,
            targets: BTreeSet::new(),
            map_spec: MapFnSpec::RollingMean {
                field: "score".into(),
                window: 365,
            },
            map_post: None,
            output_schema: OutputSchema {
                fields: vec![SchemaField {
                    name: "mean".into(),
                    kind: FieldKind::Fixed64,
                }],
            },
            reduce_spec: ReduceFnSpec::Mean,
            reduce_post: Some("clamp(0,100)".into()),
            threat_model: ThreatModel::SemiHonest3PC,
            proposer: [7u8; 32],
            epsilon: None,
            mode: DataMode::Real,
            quorum: vec![0, 1, 2],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::proposal;
    use super::*;

    #[test]
    fn fixture_is_valid() {
        proposal().validate().unwrap();
    }

    #[test]
    fn zero_min_participants_names_field() {
        let mut p = proposal();
        p.min_participants = 0;
        assert_eq!(p.validate().unwrap_err().field(), Some("min_participants"));
    }

    #[test]
    fn shamir_threshold_bounds() {
        let mut p = proposal();
        p.threat_model = ThreatModel::ShamirThreshold { t: 0, n: 3 };
        assert!(p.validate().is_err());
        p.threat_model = ThreatModel::ShamirThreshold { t: 4, n: 3 };
        assert!(p.validate().is_err());
        p.threat_model = ThreatModel::ShamirThreshold { t: 2, n: 3 };
        p.validate().unwrap();
    }

    #[test]
    fn tee_stub_parses_and_validates() {
        let mut p = proposal();
        p.threat_model = ThreatModel::TEEStub;
        p.quorum.clear();
        p.validate().unwrap();
    }

    #[test]
    fn gac_is_not_plaintext_compatible() {
        let mut p = proposal();
        p.map_spec = MapFnSpec::LogprobVector {
            item_id: 0,
            count: 1,
            choices: 4,
        };
        p.output_schema.fields[0].kind = FieldKind::Fixed64Vector { length: 4 };
        p.reduce_spec = ReduceFnSpec::GacEnsemble {
            weights: vec![1.0, 1.0],
        };
        p.targets = [3, 4].into_iter().collect();
        p.validate().unwrap();
        p.threat_model = ThreatModel::PlaintextDP;
        p.epsilon = Some(1.0);
        p.quorum = vec![0];
        assert_eq!(p.validate().unwrap_err().field(), Some("threat_model"));
    }

    #[test]
    fn plaintext_dp_requires_epsilon() {
        let mut p = proposal();
        p.threat_model = ThreatModel::PlaintextDP;
        p.quorum = vec![0];
        assert_eq!(p.validate().unwrap_err().field(), Some("epsilon"));
    }

    #[test]
    fn clamp_parsing() {
        assert_eq!(
            Clamp::parse("clamp(0, inf)").unwrap(),
            Clamp {
                lo: 0.0,
                hi: f64::INFINITY
            }
        );
        assert!(Clamp::parse("round").is_err());
        assert!(Clamp::parse("clamp(3,1)").is_err());
    }

    #[test]
    fn schema_must_match_map_output() {
        let mut p = proposal();
        p.output_schema.fields[0].kind = FieldKind::Count;
        assert_eq!(p.validate().unwrap_err().field(), Some("output_schema"));
    }
}
