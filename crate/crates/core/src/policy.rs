//! Declarative privacy policies evaluated by each node before it takes part
//! in a computation, plus the manual-approval gate and the epsilon ledger.
//!
//! Policy files hold one rule per line; `#` starts a comment:
//!
//! ```text
//! require_proposer_suffix @trusted-domain.org
//! block_output_fields email,name
//! require_min_participants 100
//! allow_functions mean_of,rolling_mean,mean,sum
//! require_threat_model dishonest_majority
//! manual_approval
//! dp_budget 2.0
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::proposal::{ComputationId, ComputationProposal, DataMode, ThreatModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("invalid policy: {0}")]
    Invalid(String),
    #[error("no approval outstanding for {0}")]
    NotPending(ComputationId),
    #[error("budget exhausted: spent {spent} + {requested} > total {total}")]
    BudgetExhausted {
        spent: f64,
        requested: f64,
        total: f64,
    },
    #[error("epsilon must be positive and finite, got {0}")]
    InvalidEpsilon(f64),
}

/// Threat-model constraint in a `RequireThreatModel` rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ThreatPattern {
    SemiHonest3PC,
    /// Any Shamir threshold.
    Shamir,
    /// Shamir with t = n: every share holder must collude to reconstruct.
    ShamirFull,
    AdditiveHE,
    PlaintextDP,
    TEEStub,
}

impl ThreatPattern {
    pub fn matches(&self, tm: &ThreatModel) -> bool {
        match (self, tm) {
            (ThreatPattern::SemiHonest3PC, ThreatModel::SemiHonest3PC) => true,
            (ThreatPattern::Shamir, ThreatModel::ShamirThreshold { .. }) => true,
            (ThreatPattern::ShamirFull, ThreatModel::ShamirThreshold { t, n }) => t == n,
            (ThreatPattern::AdditiveHE, ThreatModel::AdditiveHE) => true,
            (ThreatPattern::PlaintextDP, ThreatModel::PlaintextDP) => true,
            (ThreatPattern::TEEStub, ThreatModel::TEEStub) => true,
            _ => false,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            ThreatPattern::SemiHonest3PC => "semi_honest_3pc",
            ThreatPattern::Shamir => "shamir",
            ThreatPattern::ShamirFull => "shamir_t_eq_n",
            ThreatPattern::AdditiveHE => "additive_he",
            ThreatPattern::PlaintextDP => "plaintext_dp",
            ThreatPattern::TEEStub => "tee_stub",
        }
    }

    /// Parses one name; `dishonest_majority` expands to the backends that
    /// stay private when all but one heavy node collude.
    fn parse(s: &str) -> Option<Vec<ThreatPattern>> {
        Some(match s {
            "semi_honest_3pc" => vec![ThreatPattern::SemiHonest3PC],
            "shamir" => vec![ThreatPattern::Shamir],
            "shamir_t_eq_n" => vec![ThreatPattern::ShamirFull],
            "additive_he" => vec![ThreatPattern::AdditiveHE],
            "plaintext_dp" => vec![ThreatPattern::PlaintextDP],
            "tee_stub" | "tee" => vec![ThreatPattern::TEEStub],
            "dishonest_majority" => vec![ThreatPattern::AdditiveHE, ThreatPattern::ShamirFull],
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    RequireMinParticipants(u32),
    RequireThreatModel(BTreeSet<ThreatPattern>),
    /// Suffix of the proposer's registered identity string.
    RequireProposerSuffix(String),
    /// Both the map and the reduce function must be listed.
    AllowFunctions(BTreeSet<String>),
    /// Output schema fields that must never leave the node.
    BlockOutputFields(BTreeSet<String>),
    RequireManualApproval,
    DPBudget(f64),
}

impl Rule {
    /// Identifier reported in `Decision::Reject`.
    pub fn id(&self) -> &'static str {
        match self {
            Rule::RequireMinParticipants(_) => "RequireMinParticipants",
            Rule::RequireThreatModel(_) => "RequireThreatModel",
            Rule::RequireProposerSuffix(_) => "RequireProposerSuffix",
            Rule::AllowFunctions(_) => "AllowFunctions",
            Rule::BlockOutputFields(_) => "BlockOutputFields",
            Rule::RequireManualApproval => "RequireManualApproval",
            Rule::DPBudget(_) => "DPBudget",
        }
    }

    fn passes(
        &self,
        p: &ComputationProposal,
        ledger: &BudgetLedger,
        identity: Option<&str>,
    ) -> bool {
        match self {
            Rule::RequireMinParticipants(k) => p.min_participants >= *k,
            Rule::RequireThreatModel(set) => set.iter().any(|t| t.matches(&p.threat_model)),
            Rule::RequireProposerSuffix(suffix) => identity.is_some_and(|id| id.ends_with(suffix)),
            Rule::AllowFunctions(names) => {
                names.contains(p.map_spec.registry_name())
                    && names.contains(p.reduce_spec.registry_name())
            }
            Rule::BlockOutputFields(blocked) => !p
                .output_schema
                .fields
                .iter()
                .any(|f| blocked.contains(&f.name)),
            Rule::RequireManualApproval => true,
            Rule::DPBudget(_) => {
                // Mock computations never touch the real budget.
                p.mode == DataMode::Mock || p.epsilon.is_some_and(|e| ledger.can_afford(e))
            }
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |s: &BTreeSet<String>| s.iter().cloned().collect::<Vec<_>>().join(",");
        match self {
            Rule::RequireMinParticipants(k) => write!(f, "require_min_participants {k}"),
            Rule::RequireThreatModel(set) => write!(
                f,
                "require_threat_model {}",
                set.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
            ),
            Rule::RequireProposerSuffix(s) => write!(f, "require_proposer_suffix {s}"),
            Rule::AllowFunctions(s) => write!(f, "allow_functions {}", join(s)),
            Rule::BlockOutputFields(s) => write!(f, "block_output_fields {}", join(s)),
            Rule::RequireManualApproval => write!(f, "manual_approval"),
            Rule::DPBudget(e) => write!(f, "dp_budget {e}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    Accept,
    /// Carries the identifier of the first failing rule.
    Reject(String),
    NeedsApproval,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrivacyPolicy {
    rules: Vec<Rule>,
}

impl PrivacyPolicy {
    pub fn new(rules: Vec<Rule>) -> Result<Self, PolicyError> {
        let budgets = rules
            .iter()
            .filter(|r| matches!(r, Rule::DPBudget(_)))
            .count();
        if budgets > 1 {
            return Err(PolicyError::Invalid("at most one dp_budget rule".into()));
        }
        for r in &rules {
            match r {
                Rule::RequireMinParticipants(0) => {
                    return Err(PolicyError::Invalid("min participants must be >= 1".into()))
                }
                Rule::DPBudget(e) if !(e.is_finite() && *e > 0.0) => {
                    return Err(PolicyError::Invalid("dp budget must be positive".into()))
                }
                _ => {}
            }
        }
        Ok(PrivacyPolicy { rules })
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    /// Total epsilon granted by the policy's budget rule, if any.
    pub fn dp_budget(&self) -> Option<f64> {
        self.rules.iter().find_map(|r| match r {
            Rule::DPBudget(e) => Some(*e),
            _ => None,
        })
    }

    /// A fresh ledger sized by the budget rule; unlimited without one.
    pub fn ledger(&self) -> BudgetLedger {
        BudgetLedger::new(self.dp_budget().unwrap_or(f64::INFINITY))
    }

    /// Evaluates rules in order. The first failing rule rejects; if every
    /// rule passes and manual approval is required the result is
    /// `NeedsApproval`.
    pub fn evaluate(
        &self,
        proposal: &ComputationProposal,
        ledger: &BudgetLedger,
        proposer_identity: Option<&str>,
    ) -> Decision {
        if let Some(failed) = self
            .rules
            .iter()
            .find(|r| !r.passes(proposal, ledger, proposer_identity))
        {
            return Decision::Reject(failed.id().to_string());
        }
        if self.rules.contains(&Rule::RequireManualApproval) {
            Decision::NeedsApproval
        } else {
            Decision::Accept
        }
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| PolicyError::Parse {
                line: i + 1,
                reason,
            };
            let (key, arg) = match line.split_once(char::is_whitespace) {
                Some((k, a)) => (k, a.trim()),
                None => (line, ""),
            };
            let list = || -> BTreeSet<String> {
                arg.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(str::to_string)
                    .collect()
            };
            let rule = match key {
                "require_min_participants" => Rule::RequireMinParticipants(
                    arg.parse()
                        .map_err(|_| err(format!("bad participant count `{arg}`")))?,
                ),
                "require_threat_model" => {
                    let mut set = BTreeSet::new();
                    for name in list() {
                        let pats = ThreatPattern::parse(&name)
                            .ok_or_else(|| err(format!("unknown threat model `{name}`")))?;
                        set.extend(pats);
                    }
                    if set.is_empty() {
                        return Err(err("empty threat model list".into()));
                    }
                    Rule::RequireThreatModel(set)
                }
                "require_proposer_suffix" if !arg.is_empty() => {
                    Rule::RequireProposerSuffix(arg.to_string())
                }
                "allow_functions" => Rule::AllowFunctions(list()),
                "block_output_fields" => Rule::BlockOutputFields(list()),
                "manual_approval" if arg.is_empty() => Rule::RequireManualApproval,
                "dp_budget" => Rule::DPBudget(
                    arg.parse()
                        .map_err(|_| err(format!("bad epsilon `{arg}`")))?,
                ),
                _ => return Err(err(format!("unrecognised rule `{line}`"))),
            };
            rules.push(rule);
        }
        PrivacyPolicy::new(rules)
    }
}

impl fmt::Display for PrivacyPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rules {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// Cumulative epsilon spent by one node. Composition is additive.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    total: f64,
    spent: f64,
}

impl BudgetLedger {
    pub fn new(total: f64) -> Self {
        BudgetLedger { total, spent: 0.0 }
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn spent(&self) -> f64 {
        self.spent
    }

    pub fn can_afford(&self, epsilon: f64) -> bool {
        self.spent + epsilon <= self.total
    }

    /// Spends `epsilon` or leaves the ledger untouched.
    pub fn charge(&mut self, epsilon: f64) -> Result<(), PolicyError> {
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(PolicyError::InvalidEpsilon(epsilon));
        }
        if !self.can_afford(epsilon) {
            return Err(PolicyError::BudgetExhausted {
                spent: self.spent,
                requested: epsilon,
                total: self.total,
            });
        }
        self.spent += epsilon;
        Ok(())
    }
}

/// Outstanding manual approvals, keyed by computation.
#[derive(Debug, Clone, Default)]
pub struct ApprovalQueue {
    pending: BTreeMap<ComputationId, ()>,
}

impl ApprovalQueue {
    pub fn submit(&mut self, id: ComputationId) {
        self.pending.insert(id, ());
    }

    pub fn is_pending(&self, id: &ComputationId) -> bool {
        self.pending.contains_key(id)
    }

    /// Resolves a pending approval. A second call for the same computation
    /// fails with `NotPending`.
    pub fn approve(&mut self, id: ComputationId, verdict: bool) -> Result<Decision, PolicyError> {
        self.pending
            .remove(&id)
            .ok_or(PolicyError::NotPending(id))?;
        Ok(if verdict {
            Decision::Accept
        } else {
            Decision::Reject("ManualDenial".into())
        })
    }
}
