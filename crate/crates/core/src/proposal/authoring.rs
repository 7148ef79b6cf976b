//! Human-editable TOML form of a proposal. Keys match the struct fields.
//!
//! ```toml
//! id = "000102030405060708090a0b0c0d0e0f"
//! deadline = 40
//! min_participants = 500
//! budget = 0
//! proposer = "<64 hex chars>"
//! quorum = [0, 1, 2]
//! map_spec = { name = "rolling_mean", field = "score", window = 365 }
//! reduce_spec = { name = "mean" }
//! threat_model = { name = "semi_honest_3pc" }
//! output_schema = { fields = [{ name = "mean", kind = "fixed64" }] }
//! ```

use super::{ComputationProposal, ProposalError};

/// Parses and validates the authoring text.
pub fn from_authoring_text(text: &str) -> Result<ComputationProposal, ProposalError> {
    let p: ComputationProposal =
        toml::from_str(text).map_err(|e| ProposalError::Parse(e.to_string()))?;
    p.validate()?;
    Ok(p)
}

/// Field dump in the authoring format; stable for equal proposals.
pub fn to_authoring_text(p: &ComputationProposal) -> Result<String, ProposalError> {
    toml::to_string(p).map_err(|e| ProposalError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::fixtures::proposal;
    use crate::proposal::{MapFnSpec, ReduceFnSpec, ThreatModel};

    #[test]
    fn dump_then_parse_is_identity() {
        let mut p = proposal();
        p.threat_model = ThreatModel::ShamirThreshold { t: 2, n: 3 };
        p.epsilon = Some(0.5);
        let text = to_authoring_text(&p).unwrap();
        assert_eq!(from_authoring_text(&text).unwrap(), p);
    }

    #[test]
    fn parses_handwritten_file() {
        let text = r#"
id = "000102030405060708090a0b0c0d0e0f"
deadline = 40
min_participants = 2
budget = 10
targets = [7, 3]
proposer = "0707070707070707070707070707070707070707070707070707070707070707"
quorum = [0, 1, 2]
map_spec = { name = "logprob_vector", item_id = 0, count = 2, choices = 4 }
reduce_spec = { name = "gac_ensemble", weights = [0.5, 0.25] }
threat_model = { name = "semi_honest_3pc" }

[[output_schema.fields]]
name = "logprobs"
kind = "fixed64_vector"
length = 8
"#;
        let p = from_authoring_text(text).unwrap();
        assert_eq!(p.targets.iter().copied().collect::<Vec<_>>(), vec![3, 7]);
        assert!(matches!(
            p.map_spec,
            MapFnSpec::LogprobVector { count: 2, .. }
        ));
        assert!(matches!(p.reduce_spec, ReduceFnSpec::GacEnsemble { .. }));
    }

    #[test]
    fn invalid_value_names_field() {
        let mut text = to_authoring_text(&proposal()).unwrap();
        text = text.replace("min_participants = 500", "min_participants = 0");
        let err = from_authoring_text(&text).unwrap_err();
        assert_eq!(err.field(), Some("min_participants"));
    }
}
