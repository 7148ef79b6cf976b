//! Deterministic scenario driver.
//!
//! Node layout for every scenario: light nodes `0..n_light`, heavy nodes
//! `n_light..n_light + n_heavy`, then the proposer. All randomness comes
//! from ChaCha streams seeded by the config seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ed25519_dalek::SigningKey;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{derive_mock, LocalDataset, MapError, MockMode, Provenance};
use crate::policy::{PolicyError, PrivacyPolicy, Rule};
use crate::proposal::{
    sign_proposal, signing_key_from_seed, ComputationId, ComputationProposal, DataMode, MapFnSpec,
    OutputSchema, ProposalError, ReduceFnSpec, SchemaField, SignedProposal, ThreatModel,
};
use crate::reduce::{
    apply_reduce, argmax_lowest, gac_ensemble, gini, he_keygen, theoretical_max, top_decile_share,
    HEPublicKey, ReduceError, ReduceOutput, WordSubmission,
};
use crate::runtime::{
    choice_count, contributor_weight, heavy_on_deadline, heavy_on_share, holders,
    light_on_proposal, AbortReason, ComputationRecord, ContributionTrace, HeavyNodeState,
    LightNodeState, LightOutcome, Phase, ProposerState,
};
use crate::stats::{representation_ratio, summarize, SummaryStats};
use crate::transport::{
    Envelope, Network, NetworkConfig, NodeAddress, Payload, TraceRecord, TransportError,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("report encoding: {0}")]
    Report(String),
}

fn invalid(msg: impl Into<String>) -> SimError {
    SimError::ConfigInvalid(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    SleepStats,
    Audit,
    Ensemble,
    Custom,
}

impl ScenarioKind {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::SleepStats => "sleep_stats",
            ScenarioKind::Audit => "audit",
            ScenarioKind::Ensemble => "ensemble",
            ScenarioKind::Custom => "custom",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScenarioKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "sleep_stats" => Ok(ScenarioKind::SleepStats),
            "audit" => Ok(ScenarioKind::Audit),
            "ensemble" => Ok(ScenarioKind::Ensemble),
            "custom" => Ok(ScenarioKind::Custom),
            other => Err(invalid(format!("unknown scenario `{other}`"))),
        }
    }
}

/// Synthetic data generator for the light nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case")]
pub enum DataGen {
    /// Daily scores drawn uniformly from the integers `lo..=hi`.
    SleepScores { days: u32, lo: i64, hi: i64 },
    /// One model per light node. Each question has a uniform true label;
    /// a model's logits are N(0, 1) plus `signal[m]` on the true label,
    /// turned into log-probabilities quantized to 2^-8.
    Logits {
        questions: u32,
        choices: u32,
        batch: u32,
        signal: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Impression log of one platform: per-creator impression counts are
    /// `floor(scale * u^(-1/alpha))` at the midpoint quantiles `u` (all equal
    /// to `scale` when `alpha` is unset); industries follow the baseline
    /// except technology at 3x.
    Impressions {
        creators: u32,
        alpha: Option<f64>,
        scale: f64,
        budget: f64,
        epsilons: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: ScenarioKind,
    pub n_light: u32,
    pub n_heavy: u32,
    pub threat_model: ThreatModel,
    pub min_participants: u32,
    pub deadline_ticks: u64,
    pub seed: u64,
    pub dropout_rate: f64,
    pub data_gen: DataGen,
    /// Laplace epsilon for sleep and custom runs.
    pub epsilon: Option<f64>,
    /// Concurrent proposals for sleep and custom runs.
    pub computations: u32,
    pub network: NetworkConfig,
    pub he_modulus_bits: u64,
    /// Presentation factor for latency; ticks are the unit of record.
    pub tick_ms: Option<f64>,
}

pub const INDUSTRIES: [&str; 18] = [
    "agriculture",
    "mining",
    "utilities",
    "construction",
    "manufacturing",
    "wholesale",
    "retail",
    "transportation",
    "technology",
    "finance",
    "real_estate",
    "professional_services",
    "management",
    "administrative",
    "education",
    "healthcare",
    "arts_entertainment",
    "hospitality",
];

/// Baseline employment shares, in units of 1/200.
const BASELINE_UNITS: [u32; 18] = [
    4, 2, 2, 14, 18, 12, 22, 10, 10, 12, 4, 14, 2, 12, 20, 28, 4, 10,
];
pub const TECHNOLOGY: usize = 8;
pub const TECH_OVERSAMPLE: f64 = 3.0;

pub fn industry_baseline() -> Vec<f64> {
    BASELINE_UNITS.iter().map(|u| *u as f64 / 200.0).collect()
}

impl ScenarioConfig {
    pub fn sleep_stats(seed: u64) -> Self {
        ScenarioConfig {
            name: ScenarioKind::SleepStats,
            n_light: 1000,
            n_heavy: 50,
            threat_model: ThreatModel::SemiHonest3PC,
            min_participants: 500,
            deadline_ticks: 40,
            seed,
            dropout_rate: 0.0,
            data_gen: DataGen::SleepScores {
                days: 400,
                lo: 50,
                hi: 100,
            },
            epsilon: None,
            computations: 1,
            network: NetworkConfig::default(),
            he_modulus_bits: 512,
            tick_ms: None,
        }
    }

    pub fn ensemble(seed: u64) -> Self {
        let tail = 0.001 / 3.0;
        ScenarioConfig {
            name: ScenarioKind::Ensemble,
            n_light: 6,
            n_heavy: 3,
            min_participants: 5,
            deadline_ticks: 20,
            data_gen: DataGen::Logits {
                questions: 1000,
                choices: 4,
                batch: 50,
                signal: vec![1.0, 1.0, 1.0, 0.6, 0.6, 0.6],
                weights: vec![0.349, 0.303, 0.347, tail, tail, tail],
            },
            ..Self::sleep_stats(seed)
        }
    }

    pub fn audit(seed: u64) -> Self {
        ScenarioConfig {
            name: ScenarioKind::Audit,
            n_light: 1,
            n_heavy: 1,
            threat_model: ThreatModel::PlaintextDP,
            min_participants: 1,
            deadline_ticks: 10,
            data_gen: DataGen::Impressions {
                creators: 500,
                alpha: Some(1.114),
                scale: 10.0,
                budget: 2.0,
                epsilons: vec![0.5, 0.5, 0.5, 0.25, 0.25, 0.5],
            },
            ..Self::sleep_stats(seed)
        }
    }

    pub fn custom(seed: u64) -> Self {
        ScenarioConfig {
            name: ScenarioKind::Custom,
            n_light: 20,
            n_heavy: 5,
            min_participants: 10,
            deadline_ticks: 20,
            data_gen: DataGen::SleepScores {
                days: 30,
                lo: 50,
                hi: 100,
            },
            ..Self::sleep_stats(seed)
        }
    }

    pub fn for_kind(kind: ScenarioKind, seed: u64) -> Self {
        match kind {
            ScenarioKind::SleepStats => Self::sleep_stats(seed),
            ScenarioKind::Audit => Self::audit(seed),
            ScenarioKind::Ensemble => Self::ensemble(seed),
            ScenarioKind::Custom => Self::custom(seed),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_light < 1 || self.n_heavy < 1 {
            return Err(invalid("n_light and n_heavy must be >= 1"));
        }
        if self.min_participants < 1 {
            return Err(invalid("min_participants must be >= 1"));
        }
        if self.deadline_ticks < 1 || self.computations < 1 {
            return Err(invalid("deadline_ticks and computations must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return Err(invalid("dropout_rate must be in [0, 1]"));
        }
        if self.epsilon.is_some_and(|e| !e.is_finite() || e <= 0.0) {
            return Err(invalid("epsilon must be a positive real"));
        }
        if let ThreatModel::ShamirThreshold { t, n } = self.threat_model {
            // t = 1 hands every holder the secret itself
            if t < 2 || t > n || n > u8::MAX as u32 {
                return Err(invalid("shamir needs 2 <= t <= n <= 255"));
            }
        }
        let q = self.threat_model.quorum_size().unwrap_or(0) as u32;
        if self.n_heavy < q {
            return Err(invalid(format!(
                "{} needs {q} heavy nodes, have {}",
                self.threat_model.label(),
                self.n_heavy
            )));
        }
        if self.threat_model == ThreatModel::AdditiveHE && self.he_modulus_bits < 512 {
            return Err(invalid("he_modulus_bits must be >= 512"));
        }
        self.network.validate()?;
        match (&self.name, &self.data_gen) {
            (
                ScenarioKind::SleepStats | ScenarioKind::Custom,
                DataGen::SleepScores { days, lo, hi },
            ) => {
                if *days < 1 || lo > hi || *lo < 0 || *hi > 100 {
                    return Err(invalid(
                        "sleep scores need days >= 1 and 0 <= lo <= hi <= 100",
                    ));
                }
            }
            (
                ScenarioKind::Ensemble,
                DataGen::Logits {
                    questions,
                    choices,
                    batch,
                    signal,
                    weights,
                },
            ) => {
                if *questions < 1 || *choices < 2 || *batch < 1 {
                    return Err(invalid(
                        "ensemble needs questions >= 1, choices >= 2, batch >= 1",
                    ));
                }
                if batch.saturating_mul(*choices) > u16::MAX as u32 {
                    return Err(invalid("batch * choices too large"));
                }
                if (self.n_light as usize) > weights.len().min(signal.len()) {
                    return Err(invalid(
                        "one weight and one signal per model node is required",
                    ));
                }
                if self.threat_model == ThreatModel::PlaintextDP {
                    return Err(invalid("the ensemble needs a secure backend"));
                }
            }
            (
                ScenarioKind::Audit,
                DataGen::Impressions {
                    creators,
                    alpha,
                    scale,
                    budget,
                    epsilons,
                },
            ) => {
                if *creators < 10 || !(*scale >= 1.0) || alpha.is_some_and(|a| !(a > 1.0)) {
                    return Err(invalid(
                        "impressions need creators >= 10, scale >= 1, alpha > 1",
                    ));
                }
                if !(*budget > 0.0) || epsilons.iter().any(|e| !(*e > 0.0) || !e.is_finite()) {
                    return Err(invalid("budget and epsilons must be positive"));
                }
            }
            (kind, _) => {
                return Err(invalid(format!(
                    "data generator does not fit scenario {kind}"
                )))
            }
        }
        Ok(())
    }
}

/// Picks the light nodes that fail to respond: each one independently with
/// probability `rate`, from a stream seeded by `seed` alone.
pub fn inject_dropout(nodes: &[u32], rate: f64, seed: u64) -> BTreeSet<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x000d_5090_u64);
    let rate = rate.clamp(0.0, 1.0);
    nodes
        .iter()
        .copied()
        .filter(|_| rng.gen_bool(rate))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComputationSummary {
    pub computation_id: String,
    pub label: String,
    pub mode: DataMode,
    pub threat_model: String,
    pub phase: String,
    pub participants: u64,
    pub start_tick: u64,
    pub end_tick: Option<u64>,
    pub latency_ticks: Option<u64>,
    pub released: Option<ReduceOutput>,
    pub abort_reason: Option<String>,
    /// Bytes of released output the proposer received.
    pub released_bytes: u64,
    /// The reduce applied in the clear to the encoded, protected inputs of
    /// the counted contributors.
    pub shadow: Option<ReduceOutput>,
    /// The reduce applied in floating point to the raw map outputs of the
    /// counted contributors.
    pub plaintext_oracle: Option<ReduceOutput>,
}

impl ComputationSummary {
    pub fn is_released(&self) -> bool {
        self.phase == "released"
    }

    pub fn is_aborted(&self) -> bool {
        self.phase == "aborted"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub sent: u64,
    pub dropped: u64,
    pub duplicates: u64,
    pub delivered: u64,
    pub final_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMetrics {
    pub questions: u64,
    pub answered: u64,
    pub ensemble_accuracy: Option<f64>,
    /// Weighted argmax over all models computed in the clear.
    pub oracle_accuracy: f64,
    /// Answered questions on which the secure decision equals the clear one.
    pub oracle_agreement: Option<f64>,
    pub model_accuracy: Vec<f64>,
    pub best_single: f64,
    pub theoretical_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub index: usize,
    pub name: String,
    pub baseline: f64,
    pub generated: u64,
    pub observed: f64,
    pub ratio: f64,
    pub exact_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerPoint {
    pub label: String,
    pub mode: DataMode,
    pub epsilon: f64,
    pub answered: bool,
    pub spent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditMetrics {
    pub categories: Vec<CategoryRow>,
    pub gini: Option<f64>,
    pub top_decile_share: Option<f64>,
    pub exact_gini: f64,
    pub exact_top_decile_share: f64,
    pub total_impressions: u64,
    pub budget_total: f64,
    pub ledger: Vec<LedgerPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub computations: Vec<ComputationSummary>,
    /// Over released computations only.
    pub latency_ticks: Option<SummaryStats>,
    pub latency_ms: Option<SummaryStats>,
    /// Light-node outcomes summed over computations.
    pub participation: BTreeMap<String, u64>,
    pub dropped_nodes: Vec<u32>,
    pub network: NetworkSummary,
    pub ensemble: Option<EnsembleMetrics>,
    pub audit: Option<AuditMetrics>,
    /// Protocol invariant breaches found while running; empty when sound.
    pub violations: Vec<String>,
    pub trace_hash: String,
    #[serde(skip)]
    pub trace_csv: String,
}

impl ScenarioReport {
    pub fn released(&self) -> usize {
        self.computations.iter().filter(|c| c.is_released()).count()
    }

    pub fn aborted(&self) -> usize {
        self.computations.iter().filter(|c| c.is_aborted()).count()
    }

    pub fn summary_line(&self) -> String {
        let mean = self
            .latency_ticks
            .as_ref()
            .map_or_else(|| "na".to_string(), |s| format!("{:.3}", s.mean));
        format!(
            "scenario={} released={} aborted={} mean_latency_ticks={mean}",
            self.scenario,
            self.released(),
            self.aborted()
        )
    }

    pub fn to_json(&self) -> Result<String, SimError> {
        serde_json::to_string_pretty(self)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| SimError::Report(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, SimError> {
        serde_json::from_str(s).map_err(|e| SimError::Report(e.to_string()))
    }

    /// `computation_id,phase,participants,start_tick,end_tick,aggregate_json_or_reason`
    pub fn computations_csv(&self) -> Result<String, SimError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| SimError::Report(e.to_string());
        w.write_record([
            "computation_id",
            "label",
            "phase",
            "participants",
            "start_tick",
            "end_tick",
            "aggregate_json_or_reason",
        ])
        .map_err(err)?;
        for c in &self.computations {
            let outcome = match (&c.released, &c.abort_reason) {
                (Some(o), _) => {
                    serde_json::to_string(o).map_err(|e| SimError::Report(e.to_string()))?
                }
                (None, Some(r)) => r.clone(),
                (None, None) => String::new(),
            };
            w.write_record([
                c.computation_id.clone(),
                c.label.clone(),
                c.phase.clone(),
                c.participants.to_string(),
                c.start_tick.to_string(),
                c.end_tick.map(|t| t.to_string()).unwrap_or_default(),
                outcome,
            ])
            .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| SimError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| SimError::Report(e.to_string()))
    }

    /// One row per industry category; `None` outside audit runs.
    pub fn categories_csv(&self) -> Result<Option<String>, SimError> {
        let Some(audit) = &self.audit else {
            return Ok(None);
        };
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &audit.categories {
            w.serialize(row)
                .map_err(|e| SimError::Report(e.to_string()))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| SimError::Report(e.to_string()))?;
        String::from_utf8(bytes)
            .map(Some)
            .map_err(|e| SimError::Report(e.to_string()))
    }

    /// Every report file as (file name, contents).
    pub fn files(&self) -> Result<Vec<(String, String)>, SimError> {
        let mut out = vec![
            ("report.json".to_string(), self.to_json()?),
            ("computations.csv".to_string(), self.computations_csv()?),
            ("trace.csv".to_string(), self.trace_csv.clone()),
        ];
        if let Some(c) = self.categories_csv()? {
            out.push(("categories.csv".to_string(), c));
        }
        Ok(out)
    }
}

/// Contributors whose share reached every holder by the deadline, read off
/// the delivery trace.
pub fn trace_contributors(trace: &[TraceRecord], p: &ComputationProposal) -> BTreeSet<u32> {
    let mut out: Option<BTreeSet<u32>> = None;
    for q in holders(p) {
        let got: BTreeSet<u32> = trace
            .iter()
            .filter(|r| {
                r.payload_kind == "share_submit"
                    && r.computation_id == p.id
                    && r.to == *q
                    && r.tick <= p.deadline
            })
            .map(|r| r.from)
            .collect();
        out = Some(match out {
            None => got,
            Some(acc) => acc.intersection(&got).copied().collect(),
        });
    }
    out.unwrap_or_default()
}

/// Clear-text replay of the reduce over the words that were protected.
pub fn shadow_aggregate(
    p: &ComputationProposal,
    contributions: &[&ContributionTrace],
) -> Option<ReduceOutput> {
    if contributions.is_empty() {
        return None;
    }
    let mut agg = vec![0i128; p.output_schema.width()];
    for c in contributions {
        let k = contributor_weight(p, c.node) as i128;
        for (a, w) in agg.iter_mut().zip(&c.protected_words) {
            *a += k * (*w as i64 as i128);
        }
    }
    let kind = &p.output_schema.fields[0].kind;
    let mut out = apply_reduce(
        &p.reduce_spec,
        kind,
        &agg,
        contributions.len() as u64,
        choice_count(p),
    )
    .ok()?;
    if let Some(c) = p.reduce_clamp() {
        out.apply_clamp(&c);
    }
    Some(out)
}

/// Floating-point reduce over raw map outputs, before encoding or noise.
pub fn plaintext_oracle(
    p: &ComputationProposal,
    contributions: &[&ContributionTrace],
) -> Option<ReduceOutput> {
    let first = contributions.first()?;
    let width = first.raw_values.len();
    let mut out = if let ReduceFnSpec::GacEnsemble { .. } = p.reduce_spec {
        let ch = choice_count(p);
        let weights: Vec<f64> = contributions
            .iter()
            .map(|c| contributor_weight(p, c.node) as f64 / 65536.0)
            .collect();
        let mut picks = Vec::with_capacity(width / ch.max(1));
        for q in 0..width / ch.max(1) {
            let rows: Vec<Vec<f64>> = contributions
                .iter()
                .map(|c| c.raw_values[q * ch..(q + 1) * ch].to_vec())
                .collect();
            picks.push(gac_ensemble(&rows, &weights).ok()? as u32);
        }
        ReduceOutput::Choices(picks)
    } else {
        let mut sum = vec![0.0; width];
        for c in contributions {
            for (s, v) in sum.iter_mut().zip(&c.raw_values) {
                *s += v;
            }
        }
        let n = contributions.len() as f64;
        let kind = &p.output_schema.fields[0].kind;
        let shaped = |v: Vec<f64>| {
            if v.len() == 1
                && matches!(
                    kind,
                    crate::proposal::FieldKind::Fixed64 | crate::proposal::FieldKind::Count
                )
            {
                ReduceOutput::Scalar(v[0])
            } else {
                ReduceOutput::Vector(v)
            }
        };
        match p.reduce_spec {
            ReduceFnSpec::Sum | ReduceFnSpec::HistogramMerge => shaped(sum),
            ReduceFnSpec::Mean => shaped(sum.iter().map(|s| s / n).collect()),
            ReduceFnSpec::Gini => ReduceOutput::Scalar(gini(&sum).ok()?),
            ReduceFnSpec::TopDecileShare => ReduceOutput::Scalar(top_decile_share(&sum).ok()?),
            ReduceFnSpec::TheoMax => {
                ReduceOutput::Scalar(sum.iter().filter(|v| **v > 0.0).count() as f64 / width as f64)
            }
            ReduceFnSpec::GacEnsemble { .. } => unreachable!(),
        }
    };
    if let Some(c) = p.reduce_clamp() {
        out.apply_clamp(&c);
    }
    Some(out)
}

fn forward_path(history: &[&str]) -> bool {
    const RELEASE: [&str; 4] = ["proposed", "collecting", "reducing", "released"];
    match history.split_last() {
        None => false,
        Some((&"aborted", rest)) => {
            rest.len() <= 3 && rest.iter().zip(RELEASE).all(|(a, b)| *a == b) && !rest.is_empty()
        }
        Some(_) => history.len() <= 4 && history.iter().zip(RELEASE).all(|(a, b)| *a == b),
    }
}

struct Issued {
    signed: SignedProposal,
    label: String,
}

struct World {
    net: Network,
    lights: BTreeMap<u32, LightNodeState>,
    heavies: BTreeMap<u32, HeavyNodeState>,
    proposer: ProposerState,
    proposer_index: u32,
    proposer_key: SigningKey,
    heavy_base: u32,
    n_heavy: u32,
    dropped: BTreeSet<u32>,
    he_public: BTreeMap<u32, HEPublicKey>,
    deadlines: BTreeMap<u64, Vec<ComputationProposal>>,
    issued: Vec<Issued>,
    traces: BTreeMap<ComputationId, BTreeMap<u32, ContributionTrace>>,
    participation: BTreeMap<String, u64>,
    release_deliveries: BTreeMap<ComputationId, u32>,
    delivered: u64,
    violations: Vec<String>,
    rng: ChaCha8Rng,
    rr_offset: u32,
    issued_count: u32,
    deadline_ticks: u64,
    he_bits: u64,
}

impl World {
    fn build(
        cfg: &ScenarioConfig,
        datasets: Vec<(LocalDataset, Option<LocalDataset>)>,
        policy: &PrivacyPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<World, SimError> {
        let n_light = datasets.len() as u32;
        let heavy_base = n_light;
        let proposer_index = n_light + cfg.n_heavy;
        let proposer_key = signing_key_from_seed(&rng.gen());
        let mut addresses = Vec::with_capacity(proposer_index as usize + 1);
        let mut lights = BTreeMap::new();
        for (i, (real, mock)) in datasets.into_iter().enumerate() {
            let key = signing_key_from_seed(&rng.gen());
            let address = NodeAddress {
                index: i as u32,
                pubkey: key.verifying_key().to_bytes(),
            };
            addresses.push(address);
            let mut node = LightNodeState::new(address, key, policy.clone(), real, rng.gen());
            if let Some(m) = mock {
                node = node.with_mock(m);
            }
            lights.insert(i as u32, node);
        }
        let proposer_pub = proposer_key.verifying_key().to_bytes();
        let mut heavies = BTreeMap::new();
        for h in 0..cfg.n_heavy {
            let key = signing_key_from_seed(&rng.gen());
            let address = NodeAddress {
                index: heavy_base + h,
                pubkey: key.verifying_key().to_bytes(),
            };
            addresses.push(address);
            let mut node = HeavyNodeState::new(address);
            node.directory.insert(proposer_pub, proposer_index);
            heavies.insert(address.index, node);
        }
        let proposer_addr = NodeAddress {
            index: proposer_index,
            pubkey: proposer_pub,
        };
        addresses.push(proposer_addr);
        let light_ids: Vec<u32> = lights.keys().copied().collect();
        let dropped = inject_dropout(&light_ids, cfg.dropout_rate, cfg.seed);
        let net_cfg = NetworkConfig {
            seed: cfg.seed,
            ..cfg.network.clone()
        };
        Ok(World {
            net: Network::new(net_cfg, addresses)?,
            lights,
            heavies,
            proposer: ProposerState::new(proposer_addr, proposer_key.clone()),
            proposer_index,
            proposer_key,
            heavy_base,
            n_heavy: cfg.n_heavy,
            dropped,
            he_public: BTreeMap::new(),
            deadlines: BTreeMap::new(),
            issued: Vec::new(),
            traces: BTreeMap::new(),
            participation: BTreeMap::new(),
            release_deliveries: BTreeMap::new(),
            delivered: 0,
            violations: Vec::new(),
            rr_offset: rng.gen_range(0..cfg.n_heavy),
            rng: ChaCha8Rng::seed_from_u64(rng.gen()),
            issued_count: 0,
            deadline_ticks: cfg.deadline_ticks,
            he_bits: cfg.he_modulus_bits,
        })
    }

    /// Round-robin quorum starting from a seeded offset.
    fn next_quorum(&mut self, tm: &ThreatModel) -> Vec<u32> {
        let size = tm.quorum_size().unwrap_or(0) as u32;
        let start = self.rr_offset + self.issued_count * size;
        (0..size)
            .map(|j| self.heavy_base + (start + j) % self.n_heavy)
            .collect()
    }

    fn ensure_he_key(&mut self, holder: u32) -> Result<(), SimError> {
        if self.he_public.contains_key(&holder) {
            return Ok(());
        }
        let key = he_keygen(self.he_bits, &mut self.rng)?;
        self.he_public.insert(holder, key.public.clone());
        for h in self.heavies.values_mut() {
            h.he_directory = self.he_public.clone();
        }
        self.heavies.get_mut(&holder).expect("heavy").he_key = Some(key);
        Ok(())
    }

    /// Signs and disseminates a proposal; fills in id, deadline, quorum
    /// and proposer.
    fn issue(
        &mut self,
        mut p: ComputationProposal,
        label: &str,
        direct: bool,
    ) -> Result<ComputationId, SimError> {
        let now = self.net.now();
        p.id = ComputationId::from_u128(self.rng.gen());
        p.deadline = now + self.deadline_ticks;
        p.quorum = self.next_quorum(&p.threat_model);
        p.proposer = self.proposer_key.verifying_key().to_bytes();
        self.issued_count += 1;
        p.validate()?;
        if p.threat_model == ThreatModel::AdditiveHE {
            self.ensure_he_key(p.quorum[1])?;
        }
        let signed = sign_proposal(p.clone(), &self.proposer_key)?;
        self.proposer.issue(p.clone(), now);
        let id = p.id;
        if direct {
            self.net.mark_seen(self.proposer_index, id)?;
            let to: BTreeSet<u32> = p.targets.iter().chain(&p.quorum).copied().collect();
            for t in to {
                self.send(
                    self.proposer_index,
                    t,
                    Payload::Proposal {
                        signed: signed.clone(),
                        ttl: 0,
                    },
                );
            }
        } else {
            self.net
                .broadcast_gossip(self.proposer_index, signed.clone())?;
            for q in p.quorum.clone() {
                self.send(
                    self.proposer_index,
                    q,
                    Payload::Proposal {
                        signed: signed.clone(),
                        ttl: 0,
                    },
                );
            }
        }
        if p.threat_model == ThreatModel::TEEStub {
            self.proposer
                .abort_local(&id, AbortReason::NotImplemented("tee backend".into()), now)
                .expect("fresh record");
        } else {
            self.deadlines.entry(p.deadline).or_default().push(p);
        }
        self.issued.push(Issued {
            signed,
            label: label.to_string(),
        });
        Ok(id)
    }

    fn send(&mut self, from: u32, to: u32, payload: Payload) {
        self.net
            .send_direct(from, to, payload)
            .expect("all addresses are registered");
    }

    fn bump(&mut self, key: &str) {
        *self.participation.entry(key.to_string()).or_default() += 1;
    }

    fn secure(id: &ComputationId, issued: &[Issued]) -> Option<ThreatModel> {
        issued
            .iter()
            .find(|i| i.signed.proposal.id == *id)
            .map(|i| i.signed.proposal.threat_model)
    }

    /// Instrumentation: contributions in transit must never carry a raw map output.
    fn audit_share(&mut self, from: u32, id: &ComputationId, bytes: &[u8]) {
        let Some(tm) = Self::secure(id, &self.issued) else {
            return;
        };
        let Some(trace) = self.traces.get(id).and_then(|t| t.get(&from)) else {
            return;
        };
        if tm == ThreatModel::PlaintextDP {
            if !trace.noised {
                self.violations.push(format!(
                    "{id}: un-noised plaintext contribution from {from}"
                ));
            }
            return;
        }
        if let Ok(w) = WordSubmission::decode(bytes) {
            if w.words == trace.raw_words {
                self.violations
                    .push(format!("{id}: raw map output from {from} in transit"));
            }
        }
    }

    fn audit_partial(&mut self, id: &ComputationId, bytes: &[u8]) {
        let Ok(w) = WordSubmission::decode(bytes) else {
            return;
        };
        if let Some(ts) = self.traces.get(id) {
            if let Some(t) = ts.values().find(|t| t.raw_words == w.words) {
                self.violations
                    .push(format!("{id}: partial equals raw output of {}", t.node));
            }
        }
    }

    fn deliver(&mut self, env: Envelope) {
        self.delivered += 1;
        let now = self.net.now();
        let Envelope {
            from, to, payload, ..
        } = env;
        match &payload {
            Payload::Proposal { signed, .. } => {
                if let Some(light) = self.lights.get_mut(&to) {
                    if self.dropped.contains(&to) {
                        self.bump("dropped");
                        return;
                    }
                    let resp = light_on_proposal(light, signed, &self.he_public);
                    let key = match &resp.outcome {
                        LightOutcome::Submitted => "submitted",
                        LightOutcome::Duplicate => "duplicate",
                        LightOutcome::NotTargeted => "not_targeted",
                        LightOutcome::Rejected(_) => "rejected",
                    };
                    self.bump(key);
                    if let Some(t) = resp.trace {
                        self.traces
                            .entry(t.computation_id)
                            .or_default()
                            .insert(t.node, t);
                    }
                    for o in resp.outbound {
                        self.send(to, o.to, o.payload);
                    }
                } else if let Some(h) = self.heavies.get_mut(&to) {
                    let out = h.on_proposal(signed, now);
                    for o in out {
                        self.send(to, o.to, o.payload);
                    }
                }
            }
            Payload::ShareSubmit {
                computation_id,
                bytes,
            } => {
                self.audit_share(from, computation_id, bytes);
                if let Some(h) = self.heavies.get_mut(&to) {
                    // late or misrouted shares are dropped
                    let _ = heavy_on_share(h, from, bytes);
                }
            }
            Payload::ReducePartial {
                computation_id,
                participants,
                bytes,
            } => {
                self.audit_partial(computation_id, bytes);
                if let Some(h) = self.heavies.get_mut(&to) {
                    if let Ok(out) = h.on_partial(from, computation_id, *participants, bytes, now) {
                        for o in out {
                            self.send(to, o.to, o.payload);
                        }
                    }
                }
            }
            Payload::AggregateRelease { computation_id, .. }
            | Payload::Abort { computation_id, .. } => {
                if to != self.proposer_index {
                    return;
                }
                if matches!(payload, Payload::AggregateRelease { .. }) {
                    *self.release_deliveries.entry(*computation_id).or_default() += 1;
                }
                if let Err(e) = self.proposer.on_payload(&payload, now) {
                    self.violations
                        .push(format!("{computation_id}: second outcome ({e})"));
                }
            }
        }
    }

    fn settled(&self) -> bool {
        self.net.is_idle()
            && self.deadlines.is_empty()
            && self
                .proposer
                .records
                .values()
                .all(|r| r.phase().is_terminal())
    }

    fn tick_budget(&self) -> u64 {
        let last = self
            .deadlines
            .keys()
            .next_back()
            .copied()
            .unwrap_or(self.net.now());
        let lat = self.net.config().latency_max;
        let timeout = self
            .heavies
            .values()
            .map(|h| h.reduce_timeout)
            .max()
            .unwrap_or(0);
        last + timeout + 4 * lat + 8
    }

    fn run_until_settled(&mut self) {
        let budget = self.tick_budget();
        while self.net.now() < budget && !self.settled() {
            for env in self.net.step() {
                self.deliver(env);
            }
            let now = self.net.now();
            let due: Vec<u64> = self.deadlines.range(..=now).map(|(t, _)| *t).collect();
            for t in due {
                for p in self.deadlines.remove(&t).unwrap_or_default() {
                    let res = heavy_on_deadline(&mut self.heavies, &p, now);
                    for (from, o) in res.outbound {
                        self.send(from, o.to, o.payload);
                    }
                }
            }
            let ids: Vec<u32> = self.heavies.keys().copied().collect();
            for i in ids {
                let out = self.heavies.get_mut(&i).expect("heavy").on_tick(now);
                for o in out {
                    self.send(i, o.to, o.payload);
                }
            }
        }
        // the proposer gives up on outcomes that never arrived
        let now = self.net.now();
        for r in self.proposer.records.values_mut() {
            if !r.phase().is_terminal() {
                let _ = r.advance(
                    Phase::Aborted(AbortReason::QuorumFailure("no outcome received".into())),
                    now,
                );
            }
        }
    }

    fn summarize_computation(&mut self, issued: &Issued) -> ComputationSummary {
        let p = &issued.signed.proposal;
        let r: &ComputationRecord = &self.proposer.records[&p.id];
        let counted = trace_contributors(self.net.trace(), p);
        let contributions: Vec<&ContributionTrace> = self
            .traces
            .get(&p.id)
            .map(|t| counted.iter().filter_map(|c| t.get(c)).collect())
            .unwrap_or_default();
        let shadow = shadow_aggregate(p, &contributions);
        let oracle = plaintext_oracle(p, &contributions);
        let (released, abort_reason) = match r.phase() {
            Phase::Released(o) => (Some(o.clone()), None),
            Phase::Aborted(reason) => (None, Some(reason.to_string())),
            _ => (None, None),
        };
        let mut v = Vec::new();
        if let Some(out) = &released {
            if r.participants != counted.len() as u64 {
                v.push(format!(
                    "{}: released with {} participants, trace shows {}",
                    p.id,
                    r.participants,
                    counted.len()
                ));
            }
            if shadow.as_ref() != Some(out) {
                v.push(format!(
                    "{}: released aggregate differs from the clear replay",
                    p.id
                ));
            }
        } else {
            if self.release_deliveries.get(&p.id).copied().unwrap_or(0) > 0 {
                v.push(format!(
                    "{}: aggregate delivered for an aborted computation",
                    p.id
                ));
            }
            if self
                .proposer
                .released_bytes
                .get(&p.id)
                .copied()
                .unwrap_or(0)
                > 0
            {
                v.push(format!(
                    "{}: released bytes for an aborted computation",
                    p.id
                ));
            }
        }
        if self.release_deliveries.get(&p.id).copied().unwrap_or(0) > 1 {
            v.push(format!("{}: released more than once", p.id));
        }
        let heavy_released = self
            .heavies
            .values()
            .filter(|h| matches!(h.released.get(&p.id), Some(Phase::Released(_))))
            .count();
        let heavy_aborted = self
            .heavies
            .values()
            .filter(|h| matches!(h.released.get(&p.id), Some(Phase::Aborted(_))))
            .count();
        if heavy_released > 1 || (heavy_released == 1 && heavy_aborted > 0) {
            v.push(format!("{}: conflicting outcomes across heavy nodes", p.id));
        }
        self.violations.extend(v);
        ComputationSummary {
            computation_id: p.id.to_hex(),
            label: issued.label.clone(),
            mode: p.mode,
            threat_model: p.threat_model.label(),
            phase: r.phase().name().to_string(),
            participants: if released.is_some() {
                r.participants
            } else {
                counted.len() as u64
            },
            start_tick: r.start_tick,
            end_tick: r.end_tick,
            latency_ticks: r.latency(),
            released,
            abort_reason,
            released_bytes: self
                .proposer
                .released_bytes
                .get(&p.id)
                .copied()
                .unwrap_or(0) as u64,
            shadow,
            plaintext_oracle: oracle,
        }
    }

    fn check_phases(&mut self) {
        let mut bad = Vec::new();
        for r in self.proposer.records.values() {
            if !forward_path(r.history()) {
                bad.push(format!(
                    "{}: proposer phases {:?}",
                    r.proposal.id,
                    r.history()
                ));
            }
        }
        for h in self.heavies.values() {
            for r in h.records() {
                if !forward_path(r.history()) {
                    bad.push(format!(
                        "{}: heavy {} phases {:?}",
                        r.proposal.id,
                        h.address.index,
                        r.history()
                    ));
                }
            }
        }
        self.violations.extend(bad);
    }

    fn finish(
        mut self,
        cfg: &ScenarioConfig,
        ensemble: Option<EnsembleMetrics>,
        audit: Option<AuditMetrics>,
    ) -> (ScenarioReport, Vec<ComputationSummary>) {
        let issued = std::mem::take(&mut self.issued);
        let computations: Vec<ComputationSummary> = issued
            .iter()
            .map(|i| self.summarize_computation(i))
            .collect();
        self.check_phases();
        let latencies: Vec<f64> = computations
            .iter()
            .filter(|c| c.is_released())
            .filter_map(|c| c.latency_ticks.map(|l| l as f64))
            .collect();
        let latency_ticks = summarize(&latencies).ok();
        let latency_ms = cfg
            .tick_ms
            .and_then(|ms| summarize(&latencies.iter().map(|l| l * ms).collect::<Vec<_>>()).ok());
        let (sent, dropped, duplicates) = self.net.counters();
        let report = ScenarioReport {
            scenario: cfg.name.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            computations: computations.clone(),
            latency_ticks,
            latency_ms,
            participation: self.participation.clone(),
            dropped_nodes: self.dropped.iter().copied().collect(),
            network: NetworkSummary {
                sent,
                dropped,
                duplicates,
                delivered: self.delivered,
                final_tick: self.net.now(),
            },
            ensemble,
            audit,
            violations: self.violations.clone(),
            trace_hash: self.net.trace_hash(),
            trace_csv: self.net.trace_csv(),
        };
        (report, computations)
    }
}

fn proposal_for(
    cfg: &ScenarioConfig,
    map_spec: MapFnSpec,
    field: &str,
    reduce_spec: ReduceFnSpec,
    reduce_post: Option<&str>,
    map_post: Option<&str>,
) -> ComputationProposal {
    ComputationProposal {
        id: ComputationId::from_u128(0),
        deadline: 0,
        min_participants: cfg.min_participants,
        budget: 1_000,
        targets: BTreeSet::new(),
        output_schema: OutputSchema {
            fields: vec![SchemaField {
                name: field.to_string(),
                kind: map_spec.output_kind(),
            }],
        },
        map_spec,
        map_post: map_post.map(str::to_string),
        reduce_spec,
        reduce_post: reduce_post.map(str::to_string),
        threat_model: cfg.threat_model,
        proposer: [0; 32],
        epsilon: None,
        mode: DataMode::Real,
        quorum: Vec::new(),
    }
}

fn allow(names: &[&str]) -> Rule {
    Rule::AllowFunctions(names.iter().map(|s| s.to_string()).collect())
}

/// Runs the scenario named by `cfg.name`.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioReport, SimError> {
    cfg.validate()?;
    match cfg.name {
        ScenarioKind::SleepStats | ScenarioKind::Custom => scenario_secure_mean(cfg),
        ScenarioKind::Ensemble => scenario_ensemble(cfg),
        ScenarioKind::Audit => scenario_audit(cfg),
    }
}

/// Daily-score averages: every light node contributes its trailing
/// 365-day mean; the quorum releases the mean over contributors.
fn scenario_secure_mean(cfg: &ScenarioConfig) -> Result<ScenarioReport, SimError> {
    let DataGen::SleepScores { days, lo, hi } = cfg.data_gen else {
        return Err(invalid("sleep scenarios need the sleep score generator"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let datasets = (0..cfg.n_light)
        .map(|_| {
            let rows = (0..days)
                .map(|_| vec![rng.gen_range(lo..=hi) as f64])
                .collect();
            let mut ds = LocalDataset::from_columns(vec!["score".into()], rows, Provenance::Real)?;
            ds.set_bounds("score", 0.0, 100.0);
            Ok((ds, None))
        })
        .collect::<Result<Vec<_>, MapError>>()?;
    let policy = match cfg.name {
        ScenarioKind::SleepStats => PrivacyPolicy::new(vec![allow(&["rolling_mean", "mean"])])?,
        _ => PrivacyPolicy::default(),
    };
    let mut world = World::build(cfg, datasets, &policy, &mut rng)?;
    for k in 0..cfg.computations {
        let mut p = proposal_for(
            cfg,
            MapFnSpec::RollingMean {
                field: "score".into(),
                window: 365,
            },
            "mean",
            ReduceFnSpec::Mean,
            Some("clamp(0,100)"),
            None,
        );
        p.epsilon = match (cfg.epsilon, cfg.threat_model) {
            (Some(e), _) => Some(e),
            (None, ThreatModel::PlaintextDP) => Some(1.0),
            (None, _) => None,
        };
        world.issue(p, &format!("rolling_mean_{k}"), false)?;
    }
    world.run_until_settled();
    Ok(world.finish(cfg, None, None).0)
}

fn log_softmax_quantized(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter()
        .map(|v| ((v - lse) * 256.0).round().clamp(-32.0 * 256.0, 0.0) / 256.0)
        .collect()
}

/// Ground truth and per-model outputs of the ensemble generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCorpus {
    pub labels: Vec<usize>,
    /// `[model][question][choice]`, multiples of 2^-8.
    pub logprobs: Vec<Vec<Vec<f64>>>,
}

fn generate_logits(
    questions: u32,
    choices: usize,
    signal: &[f64],
    rng: &mut ChaCha8Rng,
) -> LogitCorpus {
    let labels: Vec<usize> = (0..questions).map(|_| rng.gen_range(0..choices)).collect();
    let normal = rand_distr::StandardNormal;
    let logprobs = signal
        .iter()
        .map(|s| {
            labels
                .iter()
                .map(|y| {
                    let z: Vec<f64> = (0..choices)
                        .map(|c| rng.sample::<f64, _>(normal) + if c == *y { *s } else { 0.0 })
                        .collect();
                    log_softmax_quantized(&z)
                })
                .collect()
        })
        .collect();
    LogitCorpus { labels, logprobs }
}

/// The corpus an ensemble run with `cfg` works on.
pub fn logit_corpus(cfg: &ScenarioConfig) -> Result<LogitCorpus, SimError> {
    cfg.validate()?;
    let DataGen::Logits {
        questions,
        choices,
        signal,
        ..
    } = &cfg.data_gen
    else {
        return Err(invalid("ensemble needs the logit generator"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(generate_logits(
        *questions,
        *choices as usize,
        &signal[..cfg.n_light as usize],
        &mut rng,
    ))
}

/// Weighted log-probability ensembling over secret-shared model outputs,
/// in question batches.
pub fn scenario_ensemble(cfg: &ScenarioConfig) -> Result<ScenarioReport, SimError> {
    cfg.validate()?;
    let DataGen::Logits {
        questions,
        choices,
        batch,
        signal,
        weights,
    } = &cfg.data_gen
    else {
        return Err(invalid("ensemble needs the logit generator"));
    };
    let (questions, choices, batch) = (*questions, *choices as usize, *batch);
    let models = cfg.n_light as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let LogitCorpus {
        labels,
        logprobs: lp,
    } = generate_logits(questions, choices, &signal[..models], &mut rng);
    let datasets = lp
        .iter()
        .map(|rows| {
            let fields = std::iter::once("item".to_string())
                .chain((0..choices).map(|c| format!("lp{c}")))
                .collect();
            let data = rows
                .iter()
                .enumerate()
                .map(|(q, r)| std::iter::once(q as f64).chain(r.iter().copied()).collect())
                .collect();
            let mut ds = LocalDataset::from_columns(fields, data, Provenance::Real)?;
            ds.set_bounds("logprob", -32.0, 0.0);
            Ok((ds, None))
        })
        .collect::<Result<Vec<_>, MapError>>()?;
    let policy = PrivacyPolicy::new(vec![allow(&["logprob_vector", "gac_ensemble"])])?;
    let mut world = World::build(cfg, datasets, &policy, &mut rng)?;
    let model_weights: Vec<f64> = weights[..models].to_vec();
    let targets: BTreeSet<u32> = (0..cfg.n_light).collect();
    let mut batches = Vec::new();
    let mut start = 0u32;
    while start < questions {
        let count = batch.min(questions - start);
        let mut p = proposal_for(
            cfg,
            MapFnSpec::LogprobVector {
                item_id: start as u64,
                count,
                choices: choices as u32,
            },
            "logprobs",
            ReduceFnSpec::GacEnsemble {
                weights: model_weights.clone(),
            },
            None,
            None,
        );
        p.targets = targets.clone();
        p.epsilon = cfg.epsilon;
        let id = world.issue(p, &format!("questions_{start}_{}", start + count), true)?;
        batches.push((id, start as usize, count as usize));
        start += count;
    }
    world.run_until_settled();

    // evaluation against ground truth, outside the protocol
    let correct: Vec<Vec<bool>> = (0..questions as usize)
        .map(|q| {
            (0..models)
                .map(|m| argmax_lowest(&lp[m][q]) == Some(labels[q]))
                .collect()
        })
        .collect();
    let model_accuracy: Vec<f64> = (0..models)
        .map(|m| correct.iter().filter(|row| row[m]).count() as f64 / questions as f64)
        .collect();
    let effective: Vec<f64> = (0..models as u32)
        .map(|m| contributor_weight(&world.issued[0].signed.proposal, m) as f64 / 65536.0)
        .collect();
    let oracle_hits = (0..questions as usize)
        .filter(|q| {
            let rows: Vec<Vec<f64>> = (0..models).map(|m| lp[m][*q].clone()).collect();
            gac_ensemble(&rows, &effective).ok() == Some(labels[*q])
        })
        .count();
    let (report, computations) = world.finish(cfg, None, None);
    let mut answered = 0u64;
    let mut hits = 0u64;
    let mut agree = 0u64;
    for ((_, first, _), c) in batches.iter().zip(&computations) {
        if let Some(ReduceOutput::Choices(picks)) = &c.released {
            let oracle = match &c.plaintext_oracle {
                Some(ReduceOutput::Choices(o)) => o.clone(),
                _ => Vec::new(),
            };
            for (j, pick) in picks.iter().enumerate() {
                answered += 1;
                hits += (*pick as usize == labels[first + j]) as u64;
                agree += (oracle.get(j) == Some(pick)) as u64;
            }
        }
    }
    let ensemble = EnsembleMetrics {
        questions: questions as u64,
        answered,
        ensemble_accuracy: (answered > 0).then(|| hits as f64 / answered as f64),
        oracle_accuracy: oracle_hits as f64 / questions as f64,
        oracle_agreement: (answered > 0).then(|| agree as f64 / answered as f64),
        best_single: model_accuracy.iter().cloned().fold(0.0, f64::max),
        model_accuracy,
        theoretical_max: theoretical_max(&correct)?,
    };
    Ok(ScenarioReport {
        ensemble: Some(ensemble),
        ..report
    })
}

/// Per-creator impression counts and per-impression industries.
struct ImpressionLog {
    per_creator: Vec<u64>,
    per_industry: Vec<u64>,
    rows: Vec<Vec<f64>>,
}

fn generate_impressions(
    creators: u32,
    alpha: Option<f64>,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> ImpressionLog {
    // midpoint quantiles: the inequality is fixed by alpha, the seed only
    // decides which creator sits at which quantile
    let mut per_creator: Vec<u64> = (0..creators)
        .map(|c| match alpha {
            Some(a) => {
                let u = (c as f64 + 0.5) / creators as f64;
                (scale * u.powf(-1.0 / a)).floor() as u64
            }
            None => scale.floor() as u64,
        })
        .collect();
    per_creator.shuffle(rng);
    let total: u64 = per_creator.iter().sum();
    // technology at 3x its baseline share, the rest scaled down to match
    let base = industry_baseline();
    let tech = TECH_OVERSAMPLE * base[TECHNOLOGY];
    let shares: Vec<f64> = base
        .iter()
        .enumerate()
        .map(|(i, b)| {
            if i == TECHNOLOGY {
                tech
            } else {
                b * (1.0 - tech) / (1.0 - base[TECHNOLOGY])
            }
        })
        .collect();
    // largest remainder keeps the category totals exact
    let exact: Vec<f64> = shares.iter().map(|s| s * total as f64).collect();
    let mut per_industry: Vec<u64> = exact.iter().map(|e| e.floor() as u64).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|a, b| {
        (exact[*b] - exact[*b].floor())
            .total_cmp(&(exact[*a] - exact[*a].floor()))
            .then(a.cmp(b))
    });
    let short = total - per_industry.iter().sum::<u64>();
    for i in order.into_iter().take(short as usize) {
        per_industry[i] += 1;
    }
    let mut industries: Vec<u32> = per_industry
        .iter()
        .enumerate()
        .flat_map(|(i, n)| std::iter::repeat_n(i as u32, *n as usize))
        .collect();
    industries.shuffle(rng);
    let rows = per_creator
        .iter()
        .enumerate()
        .flat_map(|(c, n)| std::iter::repeat_n(c as f64, *n as usize))
        .zip(industries)
        .map(|(creator, industry)| vec![creator, industry as f64])
        .collect();
    ImpressionLog {
        per_creator,
        per_industry,
        rows,
    }
}

/// Platform audit under local differential privacy: industry
/// representation and creator inequality, each run on the mock dataset
/// first and then on the real one.
pub fn scenario_audit(cfg: &ScenarioConfig) -> Result<ScenarioReport, SimError> {
    cfg.validate()?;
    let DataGen::Impressions {
        creators,
        alpha,
        scale,
        budget,
        epsilons,
    } = &cfg.data_gen
    else {
        return Err(invalid("audit needs the impression generator"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut logs = Vec::new();
    let mut datasets = Vec::new();
    for _ in 0..cfg.n_light {
        let log = generate_impressions(*creators, *alpha, *scale, &mut rng);
        let real = LocalDataset::from_columns(
            vec!["creator".into(), "industry".into()],
            log.rows.clone(),
            Provenance::Real,
        )?;
        let k = (real.len() / 10).max(1);
        let mock = derive_mock(&real, MockMode::Subsample { k, seed: rng.gen() })?;
        datasets.push((real, Some(mock)));
        logs.push(log);
    }
    let policy = PrivacyPolicy::new(vec![
        allow(&[
            "histogram_of",
            "histogram_merge",
            "gini",
            "top_decile_share",
        ]),
        Rule::DPBudget(*budget),
    ])?;
    let mut world = World::build(cfg, datasets, &policy, &mut rng)?;
    let industry_edges: Vec<f64> = (0..=INDUSTRIES.len()).map(|i| i as f64).collect();
    let creator_edges: Vec<f64> = (0..=*creators).map(|i| i as f64).collect();
    let queries = [
        (
            "industry",
            "industry",
            industry_edges,
            ReduceFnSpec::HistogramMerge,
        ),
        (
            "creator_gini",
            "creator",
            creator_edges.clone(),
            ReduceFnSpec::Gini,
        ),
        (
            "creator_top_decile",
            "creator",
            creator_edges,
            ReduceFnSpec::TopDecileShare,
        ),
    ];
    let mut ledger = Vec::new();
    let mut order = Vec::new();
    for (k, eps) in epsilons.iter().enumerate() {
        let (name, field, edges, reduce) = &queries[k % queries.len()];
        for mode in [DataMode::Mock, DataMode::Real] {
            let mut p = proposal_for(
                cfg,
                MapFnSpec::HistogramOf {
                    field: field.to_string(),
                    bin_edges: edges.clone(),
                },
                "counts",
                reduce.clone(),
                None,
                Some("clamp(0,inf)"),
            );
            p.epsilon = Some(*eps);
            p.mode = mode;
            let label = format!(
                "{name}_{k}_{}",
                if mode == DataMode::Mock {
                    "mock"
                } else {
                    "real"
                }
            );
            let id = world.issue(p, &label, false)?;
            world.run_until_settled();
            let answered = matches!(world.proposer.records[&id].phase(), Phase::Released(_));
            ledger.push(LedgerPoint {
                label,
                mode,
                epsilon: *eps,
                answered,
                spent: world.lights[&0].ledger.spent(),
            });
            order.push((*name, mode));
        }
    }
    let (report, computations) = world.finish(cfg, None, None);

    let mut per_industry = vec![0u64; INDUSTRIES.len()];
    let mut per_creator = vec![0u64; *creators as usize];
    for log in &logs {
        per_industry
            .iter_mut()
            .zip(&log.per_industry)
            .for_each(|(a, b)| *a += b);
        per_creator
            .iter_mut()
            .zip(&log.per_creator)
            .for_each(|(a, b)| *a += b);
    }
    let baseline = industry_baseline();
    let generated: Vec<f64> = per_industry.iter().map(|c| *c as f64).collect();
    let exact_ratio =
        representation_ratio(&generated, &baseline).map_err(|e| invalid(e.to_string()))?;
    let first_real = |name: &str| {
        order
            .iter()
            .zip(&computations)
            .find(|((n, m), c)| *n == name && *m == DataMode::Real && c.is_released())
            .and_then(|(_, c)| c.released.clone())
    };
    let observed = match first_real("industry") {
        Some(ReduceOutput::Vector(v)) => v,
        _ => vec![0.0; INDUSTRIES.len()],
    };
    let ratio =
        representation_ratio(&observed, &baseline).unwrap_or_else(|_| vec![0.0; INDUSTRIES.len()]);
    let categories = INDUSTRIES
        .iter()
        .enumerate()
        .map(|(i, name)| CategoryRow {
            index: i,
            name: name.to_string(),
            baseline: baseline[i],
            generated: per_industry[i],
            observed: observed[i],
            ratio: ratio[i],
            exact_ratio: exact_ratio[i],
        })
        .collect();
    let creator_counts: Vec<f64> = per_creator.iter().map(|c| *c as f64).collect();
    let audit = AuditMetrics {
        categories,
        gini: first_real("creator_gini").and_then(|o| o.as_scalar()),
        top_decile_share: first_real("creator_top_decile").and_then(|o| o.as_scalar()),
        exact_gini: gini(&creator_counts)?,
        exact_top_decile_share: top_decile_share(&creator_counts)?,
        total_impressions: per_creator.iter().sum(),
        budget_total: *budget,
        ledger,
    };
    Ok(ScenarioReport {
        audit: Some(audit),
        ..report
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_light: 30,
            n_heavy: 5,
            min_participants: 10,
            ..ScenarioConfig::custom(seed)
        }
    }

    #[test]
    fn forward_paths() {
        assert!(forward_path(&[
            "proposed",
            "collecting",
            "reducing",
            "released"
        ]));
        assert!(forward_path(&["proposed", "collecting", "aborted"]));
        assert!(forward_path(&["proposed", "aborted"]));
        assert!(forward_path(&["proposed", "collecting"]));
        assert!(!forward_path(&["proposed", "reducing"]));
        assert!(!forward_path(&["aborted"]));
        assert!(!forward_path(&[
            "proposed",
            "collecting",
            "reducing",
            "released",
            "aborted"
        ]));
    }

    #[test]
    fn custom_run_releases_clean() {
        let r = run_scenario(&small(1)).unwrap();
        assert_eq!(r.released(), 1, "{:?}", r.computations);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        let c = &r.computations[0];
        assert_eq!(c.released, c.shadow);
    }

    #[test]
    fn every_backend_matches_its_replay() {
        for tm in [
            ThreatModel::SemiHonest3PC,
            ThreatModel::ShamirThreshold { t: 2, n: 3 },
            ThreatModel::ShamirThreshold { t: 3, n: 4 },
            ThreatModel::AdditiveHE,
            ThreatModel::PlaintextDP,
        ] {
            let cfg = ScenarioConfig {
                threat_model: tm,
                computations: 2,
                ..small(7)
            };
            let r = run_scenario(&cfg).unwrap();
            assert_eq!(r.released(), 2, "{tm:?}: {:?}", r.computations);
            assert!(r.violations.is_empty(), "{tm:?}: {:?}", r.violations);
        }
    }

    #[test]
    fn tee_is_aborted_not_implemented() {
        let cfg = ScenarioConfig {
            threat_model: ThreatModel::TEEStub,
            ..small(2)
        };
        let r = run_scenario(&cfg).unwrap();
        assert_eq!(r.aborted(), 1);
        assert!(r.computations[0]
            .abort_reason
            .as_deref()
            .unwrap()
            .starts_with("NotImplemented"));
    }

    #[test]
    fn full_dropout_aborts() {
        let cfg = ScenarioConfig {
            dropout_rate: 1.0,
            ..small(3)
        };
        let r = run_scenario(&cfg).unwrap();
        assert_eq!(r.aborted(), 1);
        assert_eq!(r.computations[0].released_bytes, 0);
        assert_eq!(r.dropped_nodes.len(), 30);
    }

    #[test]
    fn dropout_draw_is_seeded() {
        let nodes: Vec<u32> = (0..1000).collect();
        assert_eq!(
            inject_dropout(&nodes, 0.3, 9),
            inject_dropout(&nodes, 0.3, 9)
        );
        assert!(inject_dropout(&nodes, 0.0, 9).is_empty());
        assert_eq!(inject_dropout(&nodes, 1.0, 9).len(), 1000);
        let k = inject_dropout(&nodes, 0.3, 9).len();
        assert!((230..370).contains(&k), "{k}");
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            ScenarioConfig {
                n_heavy: 2,
                ..small(0)
            },
            ScenarioConfig {
                dropout_rate: 1.5,
                ..small(0)
            },
            ScenarioConfig {
                min_participants: 0,
                ..small(0)
            },
            ScenarioConfig {
                threat_model: ThreatModel::ShamirThreshold { t: 1, n: 3 },
                ..small(0)
            },
            ScenarioConfig {
                data_gen: ScenarioConfig::audit(0).data_gen,
                ..small(0)
            },
        ];
        for cfg in bad {
            assert!(
                matches!(run_scenario(&cfg), Err(SimError::ConfigInvalid(_))),
                "{cfg:?}"
            );
        }
    }

    #[test]
    fn same_seed_same_report() {
        let a = run_scenario(&small(11)).unwrap();
        let b = run_scenario(&small(11)).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.trace_hash, b.trace_hash);
        let c = run_scenario(&small(12)).unwrap();
        assert_ne!(a.trace_hash, c.trace_hash);
    }

    #[test]
    fn csv_has_one_row_per_computation() {
        let r = run_scenario(&ScenarioConfig {
            computations: 3,
            ..small(4)
        })
        .unwrap();
        let csv = r.computations_csv().unwrap();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(
            "computation_id,label,phase,participants,start_tick,end_tick,aggregate_json_or_reason"
        ));
        assert!(r.categories_csv().unwrap().is_none());
    }

    #[test]
    fn summary_line_format() {
        let r = run_scenario(&small(5)).unwrap();
        let line = r.summary_line();
        assert!(
            line.starts_with("scenario=custom released=1 aborted=0 mean_latency_ticks="),
            "{line}"
        );
    }

    #[test]
    fn report_json_roundtrip() {
        let r = run_scenario(&small(6)).unwrap();
        let back = ScenarioReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.computations, r.computations);
        assert_eq!(back.trace_hash, r.trace_hash);
    }

    #[test]
    fn impression_generator_hits_category_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let log = generate_impressions(200, Some(1.2), 10.0, &mut rng);
        let total: u64 = log.per_creator.iter().sum();
        assert_eq!(log.per_industry.iter().sum::<u64>(), total);
        assert_eq!(log.rows.len() as u64, total);
        let tech = log.per_industry[TECHNOLOGY] as f64 / total as f64;
        assert!((tech - 0.15).abs() < 1.0 / total as f64 + 1e-12);
        let uniform = generate_impressions(200, None, 10.0, &mut rng);
        assert!(uniform.per_creator.iter().all(|c| *c == 10));
    }

    #[test]
    fn quantized_logprobs_are_dyadic() {
        let lp = log_softmax_quantized(&[0.3, -1.2, 2.0, 0.0]);
        for v in &lp {
            assert_eq!((v * 256.0).fract(), 0.0);
            assert!(*v <= 0.0);
        }
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 0.02);
    }
}
