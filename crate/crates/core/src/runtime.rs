//! Light and heavy node state machines.
//!
//! Nodes never touch the network directly: every handler returns the
//! envelopes it wants sent and the driver hands them to the transport.
//!
//! Quorum roles, by threat model (`q` is the proposal's quorum):
//!
//! | model      | receive contributions | reconstructs |
//! |------------|-----------------------|--------------|
//! | 3PC        | q[0], q[1], q[2]      | q[0]         |
//! | Shamir     | q[0..n] (x = i + 1)   | q[0]         |
//! | additive HE| q[0] (aggregator)     | q[1] (key)   |
//! | plaintext  | q[0]                  | q[0]         |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ed25519_dalek::SigningKey;
use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{
    apply_laplace, encode_output, execute_map, sensitivity, LocalDataset, MapError, MapValue,
    Provenance, FRAC_BITS,
};
use crate::policy::{ApprovalQueue, BudgetLedger, Decision, PrivacyPolicy};
use crate::proposal::{
    validate_output, verify_proposal, ComputationId, ComputationProposal, DataMode, MapFnSpec,
    ReduceFnSpec, SignedProposal, ThreatModel,
};
use crate::reduce::paillier::{decode_signed, encode_signed};
use crate::reduce::{
    apply_reduce, he_add, he_decrypt, he_encrypt, he_scalar_mul, he_zero, reconstruct_additive,
    reconstruct_shamir, share_shamir, share_words, AdditiveShare, CiphertextSubmission,
    HECiphertext, HEKeyPair, HEPublicKey, PrimeField, ReduceError, ReduceOutput, ShamirShare,
    WordSubmission,
};
use crate::transport::{NodeAddress, Payload};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RuntimeError {
    #[error("computation {0} is not handled by this node")]
    UnknownComputation(ComputationId),
    #[error("collection for {0} is closed")]
    PhaseClosed(ComputationId),
    #[error("illegal phase transition {from} -> {to}")]
    IllegalTransition { from: String, to: String },
    #[error("contribution rejected: {0}")]
    BadContribution(String),
    #[error("{0} is not implemented")]
    NotImplemented(&'static str),
    #[error(transparent)]
    Reduce(#[from] ReduceError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", content = "detail", rename_all = "snake_case")]
pub enum AbortReason {
    InsufficientParticipants { have: u64, need: u64 },
    QuorumFailure(String),
    NotImplemented(String),
}

impl fmt::Display for AbortReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AbortReason::InsufficientParticipants { have, need } => {
                write!(f, "InsufficientParticipants({have}<{need})")
            }
            AbortReason::QuorumFailure(m) => write!(f, "QuorumFailure({m})"),
            AbortReason::NotImplemented(m) => write!(f, "NotImplemented({m})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "phase", content = "outcome", rename_all = "snake_case")]
pub enum Phase {
    Proposed,
    Collecting,
    Reducing,
    Released(ReduceOutput),
    Aborted(AbortReason),
}

impl Phase {
    pub fn name(&self) -> &'static str {
        match self {
            Phase::Proposed => "proposed",
            Phase::Collecting => "collecting",
            Phase::Reducing => "reducing",
            Phase::Released(_) => "released",
            Phase::Aborted(_) => "aborted",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Phase::Released(_) | Phase::Aborted(_))
    }

    fn allows(&self, next: &Phase) -> bool {
        matches!(
            (self, next),
            (Phase::Proposed, Phase::Collecting)
                | (Phase::Collecting, Phase::Reducing)
                | (Phase::Reducing, Phase::Released(_))
                | (
                    Phase::Proposed | Phase::Collecting | Phase::Reducing,
                    Phase::Aborted(_)
                )
        )
    }
}

/// Lifecycle of one computation as seen by one node.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputationRecord {
    pub proposal: ComputationProposal,
    phase: Phase,
    history: Vec<&'static str>,
    pub participants: u64,
    pub start_tick: u64,
    pub end_tick: Option<u64>,
}

impl ComputationRecord {
    pub fn new(proposal: ComputationProposal, start_tick: u64) -> Self {
        ComputationRecord {
            proposal,
            phase: Phase::Proposed,
            history: vec!["proposed"],
            participants: 0,
            start_tick,
            end_tick: None,
        }
    }

    pub fn phase(&self) -> &Phase {
        &self.phase
    }

    /// Phase names visited, oldest first.
    pub fn history(&self) -> &[&'static str] {
        &self.history
    }

    /// Moves forward; terminal phases stamp `end_tick`.
    pub fn advance(&mut self, next: Phase, now: u64) -> Result<(), RuntimeError> {
        if !self.phase.allows(&next) {
            return Err(RuntimeError::IllegalTransition {
                from: self.phase.name().into(),
                to: next.name().into(),
            });
        }
        if next.is_terminal() {
            self.end_tick = Some(now);
        }
        self.history.push(next.name());
        self.phase = next;
        Ok(())
    }

    pub fn latency(&self) -> Option<u64> {
        self.end_tick.map(|e| e - self.start_tick)
    }
}

/// Which heavy nodes receive contributions.
pub fn holders(p: &ComputationProposal) -> &[u32] {
    match p.threat_model {
        ThreatModel::AdditiveHE | ThreatModel::PlaintextDP => &p.quorum[..1.min(p.quorum.len())],
        _ => &p.quorum,
    }
}

/// The heavy node that reconstructs and releases.
pub fn combiner(p: &ComputationProposal) -> Option<u32> {
    match p.threat_model {
        ThreatModel::AdditiveHE => p.quorum.get(1).copied(),
        _ => p.quorum.first().copied(),
    }
}

/// Partials the combiner needs before it can reconstruct.
fn partials_needed(tm: &ThreatModel) -> usize {
    match tm {
        ThreatModel::SemiHonest3PC => 3,
        ThreatModel::ShamirThreshold { t, .. } => *t as usize,
        _ => 1,
    }
}

/// Integer weight applied to a contributor's share: `round(w * 2^16)` for
/// the ensemble, 1 otherwise.
pub fn contributor_weight(p: &ComputationProposal, contributor: u32) -> u64 {
    match &p.reduce_spec {
        ReduceFnSpec::GacEnsemble { weights } => p
            .target_slot(contributor)
            .and_then(|s| weights.get(s))
            .map(|w| ((w * (1u64 << FRAC_BITS) as f64).round() as u64).max(1))
            .unwrap_or(0),
        _ => 1,
    }
}

/// Choices per question for log-probability maps, zero otherwise.
pub fn choice_count(p: &ComputationProposal) -> usize {
    match p.map_spec {
        MapFnSpec::LogprobVector { choices, .. } => choices as usize,
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: u32,
    pub payload: Payload,
}

/// What an operator does when a policy asks for manual approval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ManualVerdict {
    Approve,
    #[default]
    Deny,
}

/// Why a light node did or did not contribute. Never sent on the wire.
#[derive(Debug, Clone, PartialEq)]
pub enum LightOutcome {
    Submitted,
    Duplicate,
    NotTargeted,
    Rejected(String),
}

/// Pre-protection values recorded for instrumentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionTrace {
    pub computation_id: ComputationId,
    pub node: u32,
    /// Map output before noise and encoding.
    pub raw_values: Vec<f64>,
    /// Encoded map output before noise and sharing.
    pub raw_words: Vec<u64>,
    /// Encoded value after noise and post-processing, before sharing.
    pub protected_words: Vec<u64>,
    pub noised: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightResponse {
    pub outcome: LightOutcome,
    pub outbound: Vec<Outbound>,
    pub trace: Option<ContributionTrace>,
}

impl LightResponse {
    fn silent(outcome: LightOutcome) -> Self {
        LightResponse {
            outcome,
            outbound: Vec::new(),
            trace: None,
        }
    }
}

pub struct LightNodeState {
    pub address: NodeAddress,
    pub keys: SigningKey,
    pub policy: PrivacyPolicy,
    pub ledger: BudgetLedger,
    pub real_ds: LocalDataset,
    pub mock_ds: Option<LocalDataset>,
    pub seen: BTreeSet<ComputationId>,
    pub approvals: ApprovalQueue,
    pub operator: ManualVerdict,
    /// Registered identities of known proposers, by public key.
    pub identities: BTreeMap<[u8; 32], String>,
    /// Provenance of every dataset read, in order.
    pub access_log: Vec<(ComputationId, Provenance)>,
    rng: ChaCha8Rng,
}

impl LightNodeState {
    pub fn new(
        address: NodeAddress,
        keys: SigningKey,
        policy: PrivacyPolicy,
        real_ds: LocalDataset,
        seed: u64,
    ) -> Self {
        LightNodeState {
            address,
            keys,
            ledger: policy.ledger(),
            policy,
            real_ds,
            mock_ds: None,
            seen: BTreeSet::new(),
            approvals: ApprovalQueue::default(),
            operator: ManualVerdict::default(),
            identities: BTreeMap::new(),
            access_log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn with_mock(mut self, mock: LocalDataset) -> Self {
        self.mock_ds = Some(mock);
        self
    }
}

/// Handles one proposal: policy gate, map, noise, encode, share, submit.
/// Any failure leaves the node silent.
pub fn light_on_proposal(
    node: &mut LightNodeState,
    signed: &SignedProposal,
    he_keys: &BTreeMap<u32, HEPublicKey>,
) -> LightResponse {
    let p = &signed.proposal;
    if !node.seen.insert(p.id) {
        return LightResponse::silent(LightOutcome::Duplicate);
    }
    let reject = |m: &str| LightResponse::silent(LightOutcome::Rejected(m.to_string()));
    if !verify_proposal(signed) {
        return reject("signature");
    }
    if !p.targets.is_empty() && !p.targets.contains(&node.address.index) {
        return LightResponse::silent(LightOutcome::NotTargeted);
    }
    if p.threat_model == ThreatModel::TEEStub {
        return reject("tee backend not implemented");
    }
    let identity = node.identities.get(&p.proposer).map(String::as_str);
    match node.policy.evaluate(p, &node.ledger, identity) {
        Decision::Accept => {}
        Decision::Reject(rule) => return reject(&rule),
        Decision::NeedsApproval => {
            node.approvals.submit(p.id);
            let verdict = node.operator == ManualVerdict::Approve;
            match node.approvals.approve(p.id, verdict) {
                Ok(Decision::Accept) => {}
                Ok(Decision::Reject(r)) => return reject(&r),
                _ => return reject("approval"),
            }
        }
    }
    let (ds, provenance) = match p.mode {
        DataMode::Real => (&node.real_ds, Provenance::Real),
        DataMode::Mock => match &node.mock_ds {
            Some(m) => (m, Provenance::Mock),
            None => return reject("no mock dataset"),
        },
    };
    let epsilon = p.epsilon.filter(|e| *e > 0.0);
    if p.threat_model == ThreatModel::PlaintextDP && epsilon.is_none() {
        return reject("plaintext contribution without noise");
    }
    // Mock runs never spend the real budget.
    if let (Some(eps), DataMode::Real) = (epsilon, p.mode) {
        if node.ledger.charge(eps).is_err() {
            return reject("budget");
        }
    }
    node.access_log.push((p.id, provenance));
    let field = &p.output_schema.fields[0];
    let value = match execute_map(ds, &p.map_spec) {
        Ok(v) => v,
        Err(e) => return reject(&e.to_string()),
    };
    let raw_words = match encode_output(p.id, &field.name, &field.kind, &value) {
        Ok(o) => o.to_words(&p.output_schema),
        Err(e) => return reject(&e.to_string()),
    };
    let raw_values = value.values();
    let protected = match protect(ds, p, value, epsilon, &mut node.rng) {
        Ok(v) => v,
        Err(e) => return reject(&e.to_string()),
    };
    let output = match encode_output(p.id, &field.name, &field.kind, &protected) {
        Ok(o) => o,
        Err(e) => return reject(&e.to_string()),
    };
    if let Err(v) = validate_output(&output, &p.output_schema) {
        return reject(&v.0);
    }
    let words = output.to_words(&p.output_schema);
    let outbound = match share_out(p, &words, he_keys, &mut node.rng) {
        Ok(o) => o,
        Err(e) => return reject(&e.to_string()),
    };
    LightResponse {
        outcome: LightOutcome::Submitted,
        outbound,
        trace: Some(ContributionTrace {
            computation_id: p.id,
            node: node.address.index,
            raw_values,
            raw_words,
            protected_words: words,
            noised: epsilon.is_some(),
        }),
    }
}

/// Laplace noise (when epsilon is set) then the map post-processing clamp.
fn protect(
    ds: &LocalDataset,
    p: &ComputationProposal,
    mut value: MapValue,
    epsilon: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<MapValue, MapError> {
    if let Some(eps) = epsilon {
        let sens = sensitivity(ds, &p.map_spec)?;
        let mut err = None;
        value.for_each_mut(|v| match apply_laplace(*v, sens, eps, rng) {
            Ok(n) => *v = n,
            Err(e) => err = Some(e),
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    if let Some(c) = p.map_clamp() {
        value.for_each_mut(|v| *v = c.apply(*v));
    }
    Ok(value)
}

fn share_out(
    p: &ComputationProposal,
    words: &[u64],
    he_keys: &BTreeMap<u32, HEPublicKey>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Outbound>, RuntimeError> {
    let submit = |to: u32, bytes: Vec<u8>| Outbound {
        to,
        payload: Payload::ShareSubmit {
            computation_id: p.id,
            bytes,
        },
    };
    let words_msg = |party: u8, words: Vec<u64>| {
        WordSubmission {
            computation_id: p.id,
            party,
            words,
        }
        .encode()
    };
    match p.threat_model {
        ThreatModel::SemiHonest3PC => {
            let shares = share_words(words, rng);
            p.quorum
                .iter()
                .zip(shares)
                .enumerate()
                .map(|(i, (to, s))| Ok(submit(*to, words_msg(i as u8 + 1, s)?)))
                .collect()
        }
        ThreatModel::ShamirThreshold { t, n } => {
            let field = PrimeField::default();
            let mut ys = vec![Vec::with_capacity(words.len()); n as usize];
            for w in words {
                let secret = field.from_signed(*w as i64)?;
                for (i, s) in share_shamir(secret, t as usize, n as usize, rng)?
                    .into_iter()
                    .enumerate()
                {
                    ys[i].push(s.y);
                }
            }
            p.quorum
                .iter()
                .zip(ys)
                .enumerate()
                .map(|(i, (to, y))| Ok(submit(*to, words_msg(i as u8 + 1, y)?)))
                .collect()
        }
        ThreatModel::AdditiveHE => {
            let key_holder = p.quorum[1];
            let pk = he_keys.get(&key_holder).ok_or_else(|| {
                RuntimeError::BadContribution(format!("no public key for node {key_holder}"))
            })?;
            let ciphertexts = words
                .iter()
                .map(|w| he_encrypt(pk, &encode_signed(pk, *w as i64 as i128), rng))
                .collect::<Result<Vec<_>, _>>()?;
            let bytes = CiphertextSubmission {
                computation_id: p.id,
                ciphertexts,
            }
            .encode()?;
            Ok(vec![submit(p.quorum[0], bytes)])
        }
        ThreatModel::PlaintextDP => Ok(vec![submit(p.quorum[0], words_msg(0, words.to_vec())?)]),
        ThreatModel::TEEStub => Err(RuntimeError::NotImplemented("tee backend")),
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Contribution {
    Words(Vec<u64>),
    Ciphertexts(Vec<HECiphertext>),
}

#[derive(Debug, Clone)]
struct HeavyComputation {
    record: ComputationRecord,
    /// Position in the quorum.
    position: usize,
    shares: BTreeMap<u32, Contribution>,
    /// Folded partials received by the combiner, keyed by sender.
    partials: BTreeMap<u32, (u64, Contribution)>,
    reduce_by: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShareAck {
    /// Distinct contributors held so far.
    Accepted(usize),
    /// Arrived before the proposal; replayed once it shows up.
    Stashed,
}

pub struct HeavyNodeState {
    pub address: NodeAddress,
    comps: BTreeMap<ComputationId, HeavyComputation>,
    stash: BTreeMap<ComputationId, Vec<(u32, Vec<u8>)>>,
    /// Terminal outcomes this node recorded as combiner.
    pub released: BTreeMap<ComputationId, Phase>,
    pub he_key: Option<HEKeyPair>,
    pub he_directory: BTreeMap<u32, HEPublicKey>,
    /// Node index of each known proposer key.
    pub directory: BTreeMap<[u8; 32], u32>,
    pub reduce_timeout: u64,
    seen: BTreeSet<ComputationId>,
}

impl HeavyNodeState {
    pub fn new(address: NodeAddress) -> Self {
        HeavyNodeState {
            address,
            comps: BTreeMap::new(),
            stash: BTreeMap::new(),
            released: BTreeMap::new(),
            he_key: None,
            he_directory: BTreeMap::new(),
            directory: BTreeMap::new(),
            reduce_timeout: 20,
            seen: BTreeSet::new(),
        }
    }

    pub fn record(&self, id: &ComputationId) -> Option<&ComputationRecord> {
        self.comps.get(id).map(|c| &c.record)
    }

    pub fn records(&self) -> impl Iterator<Item = &ComputationRecord> {
        self.comps.values().map(|c| &c.record)
    }

    pub fn knows(&self, id: &ComputationId) -> bool {
        self.comps.contains_key(id)
    }

    /// Distinct contributors currently held for `id`.
    pub fn contributor_count(&self, id: &ComputationId) -> usize {
        self.comps.get(id).map_or(0, |c| c.shares.len())
    }

    pub fn contributors(&self, id: &ComputationId) -> BTreeSet<u32> {
        self.comps
            .get(id)
            .map(|c| c.shares.keys().copied().collect())
            .unwrap_or_default()
    }

    /// Learns a proposal. Quorum members open collection and replay any
    /// stashed shares; everyone else ignores it.
    pub fn on_proposal(&mut self, signed: &SignedProposal, now: u64) -> Vec<Outbound> {
        let p = &signed.proposal;
        if !self.seen.insert(p.id) || !verify_proposal(signed) {
            return Vec::new();
        }
        let Some(position) = p.quorum.iter().position(|q| *q == self.address.index) else {
            return Vec::new();
        };
        let mut record = ComputationRecord::new(p.clone(), now);
        record
            .advance(Phase::Collecting, now)
            .expect("proposed -> collecting");
        self.comps.insert(
            p.id,
            HeavyComputation {
                record,
                position,
                shares: BTreeMap::new(),
                partials: BTreeMap::new(),
                reduce_by: None,
            },
        );
        for (from, bytes) in self.stash.remove(&p.id).unwrap_or_default() {
            let _ = heavy_on_share(self, from, &bytes);
        }
        Vec::new()
    }

    fn proposer_of(&self, p: &ComputationProposal) -> Option<u32> {
        self.directory.get(&p.proposer).copied()
    }

    fn notify(&self, p: &ComputationProposal, payload: Payload) -> Vec<Outbound> {
        self.proposer_of(p)
            .map(|to| vec![Outbound { to, payload }])
            .unwrap_or_default()
    }

    fn abort(
        &mut self,
        id: &ComputationId,
        reason: AbortReason,
        now: u64,
        notify: bool,
    ) -> Vec<Outbound> {
        let Some(c) = self.comps.get_mut(id) else {
            return Vec::new();
        };
        if c.record.phase().is_terminal() {
            return Vec::new();
        }
        c.shares.clear();
        c.partials.clear();
        c.record
            .advance(Phase::Aborted(reason.clone()), now)
            .expect("non-terminal -> aborted");
        self.released.insert(*id, c.record.phase().clone());
        let p = c.record.proposal.clone();
        if notify {
            self.notify(
                &p,
                Payload::Abort {
                    computation_id: *id,
                    reason: reason.to_string(),
                },
            )
        } else {
            Vec::new()
        }
    }

    /// Folds the held shares of `contributors` into one partial.
    fn fold(
        &self,
        id: &ComputationId,
        contributors: &BTreeSet<u32>,
    ) -> Result<Contribution, RuntimeError> {
        let c = &self.comps[id];
        let p = &c.record.proposal;
        let width = p.output_schema.width();
        match p.threat_model {
            ThreatModel::SemiHonest3PC | ThreatModel::PlaintextDP => {
                let mut acc = vec![0u64; width];
                for who in contributors {
                    let Contribution::Words(ws) = &c.shares[who] else {
                        unreachable!()
                    };
                    let k = contributor_weight(p, *who);
                    for (a, w) in acc.iter_mut().zip(ws) {
                        *a = a.wrapping_add(w.wrapping_mul(k));
                    }
                }
                Ok(Contribution::Words(acc))
            }
            ThreatModel::ShamirThreshold { .. } => {
                let field = PrimeField::default();
                let mut acc = vec![0u64; width];
                for who in contributors {
                    let Contribution::Words(ys) = &c.shares[who] else {
                        unreachable!()
                    };
                    let k = contributor_weight(p, *who);
                    for (a, y) in acc.iter_mut().zip(ys) {
                        *a = field.add(*a, field.mul(*y, k));
                    }
                }
                Ok(Contribution::Words(acc))
            }
            ThreatModel::AdditiveHE => {
                let pk = self
                    .he_directory
                    .get(&p.quorum[1])
                    .ok_or(RuntimeError::NotImplemented("missing key"))?;
                let mut acc = vec![he_zero(); width];
                for who in contributors {
                    let Contribution::Ciphertexts(cs) = &c.shares[who] else {
                        unreachable!()
                    };
                    let k = BigUint::from(contributor_weight(p, *who));
                    for (a, ct) in acc.iter_mut().zip(cs) {
                        let scaled = he_scalar_mul(pk, ct, &k)?;
                        *a = he_add(pk, a, &scaled)?;
                    }
                }
                Ok(Contribution::Ciphertexts(acc))
            }
            ThreatModel::TEEStub => Err(RuntimeError::NotImplemented("tee backend")),
        }
    }

    /// Accepts a folded partial at the combiner; reconstructs and releases
    /// once enough have arrived.
    pub fn on_partial(
        &mut self,
        from: u32,
        id: &ComputationId,
        participants: u64,
        bytes: &[u8],
        now: u64,
    ) -> Result<Vec<Outbound>, RuntimeError> {
        let c = self
            .comps
            .get_mut(id)
            .ok_or(RuntimeError::UnknownComputation(*id))?;
        if *c.record.phase() != Phase::Reducing {
            return Err(RuntimeError::PhaseClosed(*id));
        }
        let p = &c.record.proposal;
        if combiner(p) != Some(self.address.index) {
            return Err(RuntimeError::UnknownComputation(*id));
        }
        let slot = p
            .quorum
            .iter()
            .position(|q| *q == from)
            .ok_or_else(|| RuntimeError::BadContribution(format!("{from} not in quorum")))?;
        let body = match p.threat_model {
            ThreatModel::AdditiveHE => {
                Contribution::Ciphertexts(CiphertextSubmission::decode(bytes)?.ciphertexts)
            }
            _ => {
                let w = WordSubmission::decode(bytes)?;
                if w.party as usize != slot + 1 {
                    return Err(RuntimeError::BadContribution("party mismatch".into()));
                }
                Contribution::Words(w.words)
            }
        };
        c.partials.insert(from, (participants, body));
        if c.partials.len() < partials_needed(&p.threat_model) {
            return Ok(Vec::new());
        }
        match self.reconstruct(id) {
            Ok((aggregate, n)) => Ok(self.release(id, &aggregate, n, now)),
            Err(e) => Ok(self.abort(id, AbortReason::QuorumFailure(e.to_string()), now, true)),
        }
    }

    fn reconstruct(&self, id: &ComputationId) -> Result<(Vec<i128>, u64), RuntimeError> {
        let c = &self.comps[id];
        let p = &c.record.proposal;
        let width = p.output_schema.width();
        let participants = c.partials.values().map(|(n, _)| *n).min().unwrap_or(0);
        if c.partials.values().any(|(n, _)| *n != participants) {
            return Err(RuntimeError::BadContribution(
                "partials disagree on participants".into(),
            ));
        }
        let words = |from: &u32| match &c.partials[from].1 {
            Contribution::Words(w) if w.len() == width => Ok(w.clone()),
            _ => Err(RuntimeError::BadContribution("partial width".into())),
        };
        let mut out = Vec::with_capacity(width);
        match p.threat_model {
            ThreatModel::SemiHonest3PC => {
                let parts = p.quorum.iter().map(words).collect::<Result<Vec<_>, _>>()?;
                for i in 0..width {
                    let shares: Vec<_> = parts
                        .iter()
                        .enumerate()
                        .map(|(k, w)| AdditiveShare {
                            party_index: k as u8 + 1,
                            raw: w[i],
                        })
                        .collect();
                    out.push(reconstruct_additive(&shares)? as i64 as i128);
                }
            }
            ThreatModel::ShamirThreshold { t, .. } => {
                let field = PrimeField::default();
                let senders: Vec<(u64, Vec<u64>)> = c
                    .partials
                    .keys()
                    .map(|from| {
                        let x = p.quorum.iter().position(|q| q == from).expect("member") as u64 + 1;
                        words(from).map(|w| (x, w))
                    })
                    .collect::<Result<_, _>>()?;
                for i in 0..width {
                    let shares: Vec<_> = senders
                        .iter()
                        .map(|(x, w)| ShamirShare { x: *x, y: w[i] })
                        .collect();
                    out.push(field.to_signed(reconstruct_shamir(&shares, t as usize)?) as i128);
                }
            }
            ThreatModel::AdditiveHE => {
                let key = self
                    .he_key
                    .as_ref()
                    .ok_or(RuntimeError::NotImplemented("missing decryption key"))?;
                let Some((_, Contribution::Ciphertexts(cs))) = c.partials.values().next() else {
                    return Err(RuntimeError::BadContribution("expected ciphertexts".into()));
                };
                if cs.len() != width {
                    return Err(RuntimeError::BadContribution("partial width".into()));
                }
                for ct in cs {
                    out.push(decode_signed(&key.public, &he_decrypt(key, ct)?)?);
                }
            }
            ThreatModel::PlaintextDP => {
                let w = words(&self.address.index)?;
                out.extend(w.iter().map(|v| *v as i64 as i128));
            }
            ThreatModel::TEEStub => return Err(RuntimeError::NotImplemented("tee backend")),
        }
        Ok((out, participants))
    }

    fn release(
        &mut self,
        id: &ComputationId,
        aggregate: &[i128],
        participants: u64,
        now: u64,
    ) -> Vec<Outbound> {
        let c = self.comps.get_mut(id).expect("known");
        let p = c.record.proposal.clone();
        let kind = &p.output_schema.fields[0].kind;
        let mut output = match apply_reduce(
            &p.reduce_spec,
            kind,
            aggregate,
            participants,
            choice_count(&p),
        ) {
            Ok(o) => o,
            Err(e) => {
                return self.abort(id, AbortReason::QuorumFailure(e.to_string()), now, true);
            }
        };
        if let Some(clamp) = p.reduce_clamp() {
            output.apply_clamp(&clamp);
        }
        c.partials.clear();
        c.record.participants = participants;
        c.record
            .advance(Phase::Released(output.clone()), now)
            .expect("reducing -> released");
        self.released.insert(*id, c.record.phase().clone());
        self.notify(
            &p,
            Payload::AggregateRelease {
                computation_id: *id,
                participants,
                output,
            },
        )
    }

    /// Times out reductions whose partials never arrived.
    pub fn on_tick(&mut self, now: u64) -> Vec<Outbound> {
        let overdue: Vec<ComputationId> = self
            .comps
            .iter()
            .filter(|(_, c)| {
                *c.record.phase() == Phase::Reducing
                    && combiner(&c.record.proposal) == Some(self.address.index)
                    && c.reduce_by.is_some_and(|t| now >= t)
            })
            .map(|(id, _)| *id)
            .collect();
        overdue
            .into_iter()
            .flat_map(|id| {
                self.abort(
                    &id,
                    AbortReason::QuorumFailure("reduce timeout".into()),
                    now,
                    true,
                )
            })
            .collect()
    }
}

/// Accepts one contribution. The contributor is the envelope sender; a
/// second submission from the same contributor replaces the first.
pub fn heavy_on_share(
    node: &mut HeavyNodeState,
    from: u32,
    bytes: &[u8],
) -> Result<ShareAck, RuntimeError> {
    let id = crate::reduce::wire::peek_computation_id(bytes)?;
    let Some(c) = node.comps.get_mut(&id) else {
        if node.seen.contains(&id) {
            // known proposal, but this node is not a holder
            return Err(RuntimeError::UnknownComputation(id));
        }
        node.stash
            .entry(id)
            .or_default()
            .push((from, bytes.to_vec()));
        return Ok(ShareAck::Stashed);
    };
    if *c.record.phase() != Phase::Collecting {
        return Err(RuntimeError::PhaseClosed(id));
    }
    let p = &c.record.proposal;
    if !holders(p).contains(&node.address.index) {
        return Err(RuntimeError::UnknownComputation(id));
    }
    let width = p.output_schema.width();
    let contribution = match p.threat_model {
        ThreatModel::AdditiveHE => {
            let s = CiphertextSubmission::decode(bytes)?;
            if s.ciphertexts.len() != width {
                return Err(RuntimeError::BadContribution("width".into()));
            }
            Contribution::Ciphertexts(s.ciphertexts)
        }
        _ => {
            let s = WordSubmission::decode(bytes)?;
            let expected = match p.threat_model {
                ThreatModel::PlaintextDP => 0,
                _ => c.position as u8 + 1,
            };
            if s.party != expected || s.words.len() != width {
                return Err(RuntimeError::BadContribution("party or width".into()));
            }
            Contribution::Words(s.words)
        }
    };
    c.shares.insert(from, contribution);
    Ok(ShareAck::Accepted(c.shares.len()))
}

/// Result of closing collection for one computation across its quorum.
#[derive(Debug, Clone, PartialEq)]
pub struct DeadlineResult {
    /// Envelopes to send, with their sending heavy node.
    pub outbound: Vec<(u32, Outbound)>,
    /// Contributors counted (quorum intersection).
    pub participants: u64,
    pub aborted: Option<AbortReason>,
}

/// Closes collection at the deadline. A contributor counts only if every
/// holder has its share. Below the threshold every member discards its
/// shares and the computation aborts; otherwise holders fold locally and
/// send partials to the combiner.
pub fn heavy_on_deadline(
    heavies: &mut BTreeMap<u32, HeavyNodeState>,
    proposal: &ComputationProposal,
    now: u64,
) -> DeadlineResult {
    let id = proposal.id;
    let quorum = &proposal.quorum;
    let mut result = DeadlineResult {
        outbound: Vec::new(),
        participants: 0,
        aborted: None,
    };
    let collecting = |h: &HeavyNodeState| {
        h.record(&id)
            .is_some_and(|r| *r.phase() == Phase::Collecting)
    };
    let all_ready = quorum
        .iter()
        .all(|q| heavies.get(q).is_some_and(collecting));
    let abort_all = |heavies: &mut BTreeMap<u32, HeavyNodeState>,
                     reason: AbortReason,
                     out: &mut Vec<(u32, Outbound)>| {
        // the combiner reports if it can, else the first member that knows
        let reporter = std::iter::once(combiner(proposal))
            .flatten()
            .chain(quorum.iter().copied())
            .find(|q| heavies.get(q).is_some_and(|h| h.knows(&id)));
        for q in quorum {
            if let Some(h) = heavies.get_mut(q) {
                let msgs = h.abort(&id, reason.clone(), now, Some(*q) == reporter);
                out.extend(msgs.into_iter().map(|m| (*q, m)));
            }
        }
    };
    if !all_ready {
        let reason = AbortReason::QuorumFailure("quorum member unavailable".into());
        abort_all(heavies, reason.clone(), &mut result.outbound);
        result.aborted = Some(reason);
        return result;
    }
    if proposal.threat_model == ThreatModel::PlaintextDP {
        let h = heavies.get_mut(&quorum[0]).expect("checked");
        let (out, participants, aborted) = run_plaintext_dp_path(h, &id, now);
        result.outbound = out.into_iter().map(|m| (quorum[0], m)).collect();
        result.participants = participants;
        result.aborted = aborted;
        return result;
    }
    let holder_set = holders(proposal);
    let mut counted: Option<BTreeSet<u32>> = None;
    for q in holder_set {
        let held = heavies[q].contributors(&id);
        counted = Some(match counted {
            None => held,
            Some(acc) => acc.intersection(&held).copied().collect(),
        });
    }
    let counted = counted.unwrap_or_default();
    result.participants = counted.len() as u64;
    let need = proposal.min_participants as u64;
    if result.participants < need {
        let reason = AbortReason::InsufficientParticipants {
            have: result.participants,
            need,
        };
        abort_all(heavies, reason.clone(), &mut result.outbound);
        result.aborted = Some(reason);
        return result;
    }
    let comb = combiner(proposal).expect("quorum present");
    for q in quorum {
        let h = heavies.get_mut(q).expect("checked");
        let is_holder = holder_set.contains(q);
        let folded = if is_holder {
            Some(h.fold(&id, &counted))
        } else {
            None
        };
        let c = h.comps.get_mut(&id).expect("checked");
        c.shares.clear();
        c.record.participants = counted.len() as u64;
        c.record
            .advance(Phase::Reducing, now)
            .expect("collecting -> reducing");
        if *q == comb {
            c.reduce_by = Some(now + h.reduce_timeout);
        }
        // A holder that cannot fold leaves the combiner to time out.
        if let Some(Ok(body)) = folded {
            let position = c.position;
            let bytes = match body {
                Contribution::Words(words) => WordSubmission {
                    computation_id: id,
                    party: position as u8 + 1,
                    words,
                }
                .encode(),
                Contribution::Ciphertexts(ciphertexts) => CiphertextSubmission {
                    computation_id: id,
                    ciphertexts,
                }
                .encode(),
            };
            if let Ok(bytes) = bytes {
                result.outbound.push((
                    *q,
                    Outbound {
                        to: comb,
                        payload: Payload::ReducePartial {
                            computation_id: id,
                            participants: counted.len() as u64,
                            bytes,
                        },
                    },
                ));
            }
        }
    }
    result
}

/// Single-heavy path for noised plaintext contributions: threshold check,
/// direct sum, reduce, release.
pub fn run_plaintext_dp_path(
    heavy: &mut HeavyNodeState,
    id: &ComputationId,
    now: u64,
) -> (Vec<Outbound>, u64, Option<AbortReason>) {
    let Some(c) = heavy.comps.get(id) else {
        return (
            Vec::new(),
            0,
            Some(AbortReason::QuorumFailure("unknown".into())),
        );
    };
    let p = c.record.proposal.clone();
    let contributors: BTreeSet<u32> = c.shares.keys().copied().collect();
    let n = contributors.len() as u64;
    if n < p.min_participants as u64 {
        let reason = AbortReason::InsufficientParticipants {
            have: n,
            need: p.min_participants as u64,
        };
        return (heavy.abort(id, reason.clone(), now, true), n, Some(reason));
    }
    let folded = heavy.fold(id, &contributors);
    let c = heavy.comps.get_mut(id).expect("known");
    c.shares.clear();
    c.record
        .advance(Phase::Reducing, now)
        .expect("collecting -> reducing");
    let Ok(Contribution::Words(words)) = folded else {
        let reason = AbortReason::QuorumFailure("fold".into());
        return (heavy.abort(id, reason.clone(), now, true), n, Some(reason));
    };
    let aggregate: Vec<i128> = words.iter().map(|w| *w as i64 as i128).collect();
    let out = heavy.release(id, &aggregate, n, now);
    let aborted = match heavy.released.get(id) {
        Some(Phase::Aborted(r)) => Some(r.clone()),
        _ => None,
    };
    (out, n, aborted)
}

/// The analyst that issued a computation and receives its outcome.
pub struct ProposerState {
    pub address: NodeAddress,
    pub keys: SigningKey,
    pub records: BTreeMap<ComputationId, ComputationRecord>,
    /// Release and abort messages received per computation.
    pub outcomes_received: BTreeMap<ComputationId, u32>,
    pub released_bytes: BTreeMap<ComputationId, usize>,
}

impl ProposerState {
    pub fn new(address: NodeAddress, keys: SigningKey) -> Self {
        ProposerState {
            address,
            keys,
            records: BTreeMap::new(),
            outcomes_received: BTreeMap::new(),
            released_bytes: BTreeMap::new(),
        }
    }

    /// Registers an issued proposal; collection opens at once.
    pub fn issue(&mut self, proposal: ComputationProposal, now: u64) {
        let mut r = ComputationRecord::new(proposal, now);
        r.advance(Phase::Collecting, now).expect("fresh record");
        self.records.insert(r.proposal.id, r);
    }

    pub fn on_payload(&mut self, payload: &Payload, now: u64) -> Result<(), RuntimeError> {
        let id = payload.computation_id();
        let r = self
            .records
            .get_mut(&id)
            .ok_or(RuntimeError::UnknownComputation(id))?;
        match payload {
            Payload::AggregateRelease {
                participants,
                output,
                ..
            } => {
                *self.outcomes_received.entry(id).or_default() += 1;
                let bytes = serde_json::to_vec(output).map(|b| b.len()).unwrap_or(0);
                *self.released_bytes.entry(id).or_default() += bytes;
                r.participants = *participants;
                r.advance(Phase::Reducing, now)?;
                r.advance(Phase::Released(output.clone()), now)
            }
            Payload::Abort { reason, .. } => {
                *self.outcomes_received.entry(id).or_default() += 1;
                r.advance(Phase::Aborted(parse_reason(reason)), now)
            }
            _ => Ok(()),
        }
    }

    /// Marks a computation that can never run (e.g. an unimplemented
    /// backend) as aborted.
    pub fn abort_local(
        &mut self,
        id: &ComputationId,
        reason: AbortReason,
        now: u64,
    ) -> Result<(), RuntimeError> {
        let r = self
            .records
            .get_mut(id)
            .ok_or(RuntimeError::UnknownComputation(*id))?;
        r.advance(Phase::Aborted(reason), now)
    }
}

fn parse_reason(s: &str) -> AbortReason {
    if let Some(rest) = s.strip_prefix("InsufficientParticipants(") {
        let nums: Vec<u64> = rest
            .trim_end_matches(')')
            .split('<')
            .filter_map(|n| n.parse().ok())
            .collect();
        if let [have, need] = nums[..] {
            return AbortReason::InsufficientParticipants { have, need };
        }
    }
    if let Some(rest) = s.strip_prefix("NotImplemented(") {
        return AbortReason::NotImplemented(rest.trim_end_matches(')').into());
    }
    let inner = s
        .strip_prefix("QuorumFailure(")
        .map(|r| r.trim_end_matches(')'))
        .unwrap_or(s);
    AbortReason::QuorumFailure(inner.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::Rule;
    use crate::proposal::fixtures::proposal;
    use crate::proposal::{
        sign_proposal, signing_key_from_seed, FieldKind, OutputSchema, SchemaField,
    };
    use crate::reduce::he_keygen;

    const PROPOSER: u32 = 99;

    fn addr(i: u32) -> NodeAddress {
        NodeAddress {
            index: i,
            pubkey: [i as u8; 32],
        }
    }

    fn sign(mut p: ComputationProposal) -> SignedProposal {
        let key = signing_key_from_seed(&[42; 32]);
        p.proposer = key.verifying_key().to_bytes();
        sign_proposal(p, &key).unwrap()
    }

    fn proposer_key() -> [u8; 32] {
        signing_key_from_seed(&[42; 32]).verifying_key().to_bytes()
    }

    fn scores(v: &[f64]) -> LocalDataset {
        let mut ds = LocalDataset::from_columns(
            vec!["score".into()],
            v.iter().map(|x| vec![*x]).collect(),
            Provenance::Real,
        )
        .unwrap();
        ds.set_bounds("score", 0.0, 100.0);
        ds
    }

    fn light(i: u32, v: &[f64], policy: PrivacyPolicy) -> LightNodeState {
        LightNodeState::new(
            addr(i),
            signing_key_from_seed(&[i as u8; 32]),
            policy,
            scores(v),
            i as u64,
        )
    }

    fn heavies(ids: &[u32]) -> BTreeMap<u32, HeavyNodeState> {
        ids.iter()
            .map(|i| {
                let mut h = HeavyNodeState::new(addr(*i));
                h.directory.insert(proposer_key(), PROPOSER);
                (*i, h)
            })
            .collect()
    }

    fn sum_proposal(tm: ThreatModel, quorum: Vec<u32>, min: u32) -> ComputationProposal {
        let mut p = proposal();
        p.map_spec = MapFnSpec::MeanOf {
            field: "score".into(),
        };
        p.reduce_spec = ReduceFnSpec::Sum;
        p.reduce_post = None;
        p.threat_model = tm;
        p.quorum = quorum;
        p.min_participants = min;
        if tm == ThreatModel::PlaintextDP {
            p.epsilon = Some(1e9);
        }
        p
    }

    /// Delivers every outbound share directly, then closes collection and
    /// delivers partials. Returns what the proposer would receive.
    fn run(
        p: &ComputationProposal,
        lights: &mut [LightNodeState],
        hs: &mut BTreeMap<u32, HeavyNodeState>,
        he: &BTreeMap<u32, HEPublicKey>,
    ) -> Vec<Payload> {
        let signed = sign(p.clone());
        for h in hs.values_mut() {
            h.on_proposal(&signed, 0);
        }
        for l in lights.iter_mut() {
            let resp = light_on_proposal(l, &signed, he);
            for o in resp.outbound {
                heavy_on_share(
                    hs.get_mut(&o.to).unwrap(),
                    l.address.index,
                    match &o.payload {
                        Payload::ShareSubmit { bytes, .. } => bytes,
                        _ => panic!(),
                    },
                )
                .unwrap();
            }
        }
        let res = heavy_on_deadline(hs, p, 10);
        let mut to_proposer = Vec::new();
        for (_, o) in res.outbound {
            match o.payload {
                Payload::ReducePartial {
                    computation_id,
                    participants,
                    bytes,
                } => {
                    to_proposer.push((o.to, computation_id, participants, bytes));
                }
                other => {
                    assert_eq!(o.to, PROPOSER);
                    return vec![other];
                }
            }
        }
        // partial senders are quorum members in order
        let mut out = Vec::new();
        let senders: Vec<u32> = holders(p).to_vec();
        for ((to, id, n, bytes), from) in to_proposer.into_iter().zip(senders) {
            // partials past the threshold arrive after release
            let Ok(msgs) = hs
                .get_mut(&to)
                .unwrap()
                .on_partial(from, &id, n, &bytes, 12)
            else {
                continue;
            };
            for m in msgs {
                assert_eq!(m.to, PROPOSER);
                out.push(m.payload);
            }
        }
        out
    }

    fn released_scalar(out: &[Payload]) -> f64 {
        match out {
            [Payload::AggregateRelease { output, .. }] => output.as_scalar().unwrap(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn phases_only_move_forward() {
        let mut r = ComputationRecord::new(proposal(), 0);
        assert!(r.advance(Phase::Reducing, 1).is_err());
        r.advance(Phase::Collecting, 1).unwrap();
        r.advance(Phase::Reducing, 2).unwrap();
        assert!(r.advance(Phase::Collecting, 3).is_err());
        r.advance(Phase::Released(ReduceOutput::Scalar(1.0)), 4)
            .unwrap();
        assert!(r
            .advance(Phase::Aborted(AbortReason::QuorumFailure("x".into())), 5)
            .is_err());
        assert_eq!(r.latency(), Some(4));
        assert_eq!(
            r.history(),
            ["proposed", "collecting", "reducing", "released"]
        );
    }

    #[test]
    fn accepting_3pc_node_sends_one_share_per_member() {
        let mut l = light(1, &[80.0, 90.0], PrivacyPolicy::default());
        let signed = sign(sum_proposal(
            ThreatModel::SemiHonest3PC,
            vec![10, 11, 12],
            1,
        ));
        let resp = light_on_proposal(&mut l, &signed, &BTreeMap::new());
        assert_eq!(resp.outcome, LightOutcome::Submitted);
        let to: Vec<u32> = resp.outbound.iter().map(|o| o.to).collect();
        assert_eq!(to, vec![10, 11, 12]);
        // duplicate delivery
        let again = light_on_proposal(&mut l, &signed, &BTreeMap::new());
        assert_eq!(again.outcome, LightOutcome::Duplicate);
        assert!(again.outbound.is_empty());
    }

    #[test]
    fn rejecting_policy_is_silent() {
        let pol = PrivacyPolicy::new(vec![Rule::RequireMinParticipants(1000)]).unwrap();
        let mut l = light(1, &[80.0], pol);
        let signed = sign(sum_proposal(
            ThreatModel::SemiHonest3PC,
            vec![10, 11, 12],
            1,
        ));
        let resp = light_on_proposal(&mut l, &signed, &BTreeMap::new());
        assert!(resp.outbound.is_empty());
        assert_eq!(
            resp.outcome,
            LightOutcome::Rejected("RequireMinParticipants".into())
        );
    }

    #[test]
    fn manual_approval_uses_operator_verdict() {
        let pol = PrivacyPolicy::new(vec![Rule::RequireManualApproval]).unwrap();
        let signed = sign(sum_proposal(
            ThreatModel::SemiHonest3PC,
            vec![10, 11, 12],
            1,
        ));
        let mut deny = light(1, &[80.0], pol.clone());
        assert!(light_on_proposal(&mut deny, &signed, &BTreeMap::new())
            .outbound
            .is_empty());
        let mut ok = light(2, &[80.0], pol);
        ok.operator = ManualVerdict::Approve;
        assert_eq!(
            light_on_proposal(&mut ok, &signed, &BTreeMap::new())
                .outbound
                .len(),
            3
        );
    }

    #[test]
    fn tampered_signature_is_silent() {
        let mut l = light(1, &[80.0], PrivacyPolicy::default());
        let mut signed = sign(sum_proposal(
            ThreatModel::SemiHonest3PC,
            vec![10, 11, 12],
            1,
        ));
        signed.signature[3] ^= 0x40;
        assert!(light_on_proposal(&mut l, &signed, &BTreeMap::new())
            .outbound
            .is_empty());
    }

    #[test]
    fn share_dedup_and_late_shares() {
        let mut hs = heavies(&[10, 11, 12]);
        let p = sum_proposal(ThreatModel::SemiHonest3PC, vec![10, 11, 12], 1);
        let signed = sign(p.clone());
        let h = hs.get_mut(&10).unwrap();
        h.on_proposal(&signed, 0);
        let share = |v: u64| {
            WordSubmission {
                computation_id: p.id,
                party: 1,
                words: vec![v],
            }
            .encode()
            .unwrap()
        };
        assert_eq!(heavy_on_share(h, 5, &share(1)), Ok(ShareAck::Accepted(1)));
        assert_eq!(heavy_on_share(h, 5, &share(2)), Ok(ShareAck::Accepted(1)));
        for c in 0..999 {
            heavy_on_share(h, 1000 + c, &share(3)).unwrap();
        }
        assert_eq!(h.contributor_count(&p.id), 1000);
        // wrong party index for this member
        let bad = WordSubmission {
            computation_id: p.id,
            party: 2,
            words: vec![1],
        }
        .encode()
        .unwrap();
        assert!(heavy_on_share(h, 7, &bad).is_err());
        // a non-holder never accepts
        let mut q = sum_proposal(ThreatModel::SemiHonest3PC, vec![20, 21, 22], 1);
        q.id = ComputationId::from_u128(77);
        let other = sign(q);
        h.on_proposal(&other, 0);
        let stray = WordSubmission {
            computation_id: other.proposal.id,
            party: 1,
            words: vec![1],
        }
        .encode()
        .unwrap();
        assert_eq!(
            heavy_on_share(h, 7, &stray),
            Err(RuntimeError::UnknownComputation(other.proposal.id))
        );
        // after the deadline the phase is closed
        heavy_on_deadline(&mut hs, &p, 5);
        let h = hs.get_mut(&10).unwrap();
        assert_eq!(
            heavy_on_share(h, 8, &share(1)),
            Err(RuntimeError::PhaseClosed(p.id))
        );
    }

    #[test]
    fn early_share_is_stashed_then_counted() {
        let mut hs = heavies(&[10]);
        let p = sum_proposal(ThreatModel::PlaintextDP, vec![10], 1);
        let h = hs.get_mut(&10).unwrap();
        let bytes = WordSubmission {
            computation_id: p.id,
            party: 0,
            words: vec![65536],
        }
        .encode()
        .unwrap();
        assert_eq!(heavy_on_share(h, 3, &bytes), Ok(ShareAck::Stashed));
        h.on_proposal(&sign(p.clone()), 1);
        assert_eq!(h.contributor_count(&p.id), 1);
    }

    #[test]
    fn threshold_not_met_aborts_and_discards() {
        let mut hs = heavies(&[10, 11, 12]);
        let p = sum_proposal(ThreatModel::SemiHonest3PC, vec![10, 11, 12], 5);
        let mut lights: Vec<_> = (0..4)
            .map(|i| light(i, &[50.0], PrivacyPolicy::default()))
            .collect();
        let out = run(&p, &mut lights, &mut hs, &BTreeMap::new());
        assert!(matches!(&out[..], [Payload::Abort { .. }]));
        for h in hs.values() {
            assert_eq!(h.contributor_count(&p.id), 0);
            assert!(matches!(
                h.record(&p.id).unwrap().phase(),
                Phase::Aborted(AbortReason::InsufficientParticipants { have: 4, need: 5 })
            ));
        }
    }

    #[test]
    fn single_contributor_sum_is_identity() {
        for tm in [
            ThreatModel::SemiHonest3PC,
            ThreatModel::ShamirThreshold { t: 2, n: 3 },
            ThreatModel::ShamirThreshold { t: 3, n: 3 },
            ThreatModel::PlaintextDP,
        ] {
            let q: Vec<u32> = match tm {
                ThreatModel::PlaintextDP => vec![10],
                _ => vec![10, 11, 12],
            };
            let mut hs = heavies(&[10, 11, 12]);
            let p = sum_proposal(tm, q, 1);
            let mut lights = vec![light(1, &[42.5], PrivacyPolicy::default())];
            let out = run(&p, &mut lights, &mut hs, &BTreeMap::new());
            let v = released_scalar(&out);
            assert!((v - 42.5).abs() < 1e-6, "{tm:?}: {v}");
        }
    }

    #[test]
    fn mean_of_many_matches_oracle() {
        let mut hs = heavies(&[10, 11, 12]);
        let mut p = sum_proposal(ThreatModel::SemiHonest3PC, vec![10, 11, 12], 50);
        p.reduce_spec = ReduceFnSpec::Mean;
        let mut lights: Vec<_> = (0..60)
            .map(|i| light(i, &[50.0 + (i % 51) as f64], PrivacyPolicy::default()))
            .collect();
        let out = run(&p, &mut lights, &mut hs, &BTreeMap::new());
        let oracle = (0..60).map(|i| 50.0 + (i % 51) as f64).sum::<f64>() / 60.0;
        assert!((released_scalar(&out) - oracle).abs() <= (1.0 + 1.0 / 60.0) / 65536.0);
    }

    #[test]
    fn paillier_backend_end_to_end() {
        let key = he_keygen(512, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut hs = heavies(&[10, 11]);
        let dir: BTreeMap<u32, HEPublicKey> = [(11, key.public.clone())].into_iter().collect();
        for h in hs.values_mut() {
            h.he_directory = dir.clone();
        }
        hs.get_mut(&11).unwrap().he_key = Some(key);
        let p = sum_proposal(ThreatModel::AdditiveHE, vec![10, 11], 3);
        let mut lights: Vec<_> = [-1.5, 2.25, 10.0]
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut l = light(i as u32, &[*v], PrivacyPolicy::default());
                l.real_ds.set_bounds("score", -100.0, 100.0);
                l
            })
            .collect();
        let out = run(&p, &mut lights, &mut hs, &dir);
        assert_eq!(released_scalar(&out), 10.75);
    }

    #[test]
    fn missing_quorum_member_is_quorum_failure() {
        let mut hs = heavies(&[10, 11, 12]);
        let p = sum_proposal(ThreatModel::SemiHonest3PC, vec![10, 11, 12], 1);
        let signed = sign(p.clone());
        hs.get_mut(&10).unwrap().on_proposal(&signed, 0);
        hs.get_mut(&11).unwrap().on_proposal(&signed, 0);
        let res = heavy_on_deadline(&mut hs, &p, 5);
        assert!(matches!(res.aborted, Some(AbortReason::QuorumFailure(_))));
        assert_eq!(res.outbound.len(), 1);
        assert!(matches!(res.outbound[0].1.payload, Payload::Abort { .. }));
    }

    #[test]
    fn combiner_times_out_without_partials() {
        let mut hs = heavies(&[10, 11, 12]);
        let p = sum_proposal(ThreatModel::SemiHonest3PC, vec![10, 11, 12], 1);
        let signed = sign(p.clone());
        for h in hs.values_mut() {
            h.on_proposal(&signed, 0);
        }
        let mut l = light(1, &[5.0], PrivacyPolicy::default());
        for o in light_on_proposal(&mut l, &signed, &BTreeMap::new()).outbound {
            let Payload::ShareSubmit { bytes, .. } = o.payload else {
                panic!()
            };
            heavy_on_share(hs.get_mut(&o.to).unwrap(), 1, &bytes).unwrap();
        }
        let res = heavy_on_deadline(&mut hs, &p, 5);
        assert_eq!(res.outbound.len(), 3);
        // partials lost in transit
        let comb = hs.get_mut(&10).unwrap();
        assert!(comb.on_tick(10).is_empty());
        let out = comb.on_tick(25);
        assert!(matches!(
            &out[..],
            [Outbound {
                payload: Payload::Abort { .. },
                ..
            }]
        ));
        assert!(comb.on_tick(30).is_empty());
    }

    #[test]
    fn budget_exhaustion_silences_node() {
        let pol = PrivacyPolicy::new(vec![Rule::DPBudget(1.0)]).unwrap();
        let mut l = light(1, &[50.0], pol);
        let mut sent = 0;
        for k in 0..5u128 {
            let mut p = sum_proposal(ThreatModel::PlaintextDP, vec![10], 1);
            p.id = ComputationId::from_u128(k);
            p.epsilon = Some(0.25 + 0.125 * (k % 2) as f64);
            sent += light_on_proposal(&mut l, &sign(p), &BTreeMap::new())
                .outbound
                .len();
        }
        // 0.25 + 0.375 + 0.25 = 0.875; the next 0.375 would exceed 1
        assert_eq!(sent, 3);
        assert_eq!(l.ledger.spent(), 0.875);
    }

    #[test]
    fn mock_mode_reads_mock_only_and_spends_nothing() {
        let pol = PrivacyPolicy::new(vec![Rule::DPBudget(1.0)]).unwrap();
        let mut l = light(1, &[50.0], pol).with_mock(scores(&[10.0]).clone());
        let mut p = sum_proposal(ThreatModel::PlaintextDP, vec![10], 1);
        p.mode = DataMode::Mock;
        p.epsilon = Some(0.5);
        let resp = light_on_proposal(&mut l, &sign(p.clone()), &BTreeMap::new());
        assert_eq!(resp.outcome, LightOutcome::Submitted);
        assert_eq!(l.ledger.spent(), 0.0);
        assert_eq!(l.access_log, vec![(p.id, Provenance::Mock)]);
    }

    #[test]
    fn plaintext_release_equals_sum_of_noised_contributions() {
        let mut hs = heavies(&[10]);
        let mut p = sum_proposal(ThreatModel::PlaintextDP, vec![10], 3);
        p.epsilon = Some(0.5);
        let signed = sign(p.clone());
        hs.get_mut(&10).unwrap().on_proposal(&signed, 0);
        let mut logged = Vec::new();
        for i in 0..3 {
            let mut l = light(i, &[20.0 * (i + 1) as f64], PrivacyPolicy::default());
            let resp = light_on_proposal(&mut l, &signed, &BTreeMap::new());
            let t = resp.trace.unwrap();
            assert!(t.noised);
            assert_ne!(t.raw_words, t.protected_words);
            logged.push(t.protected_words[0] as i64);
            let Payload::ShareSubmit { bytes, .. } = &resp.outbound[0].payload else {
                panic!()
            };
            heavy_on_share(hs.get_mut(&10).unwrap(), i, bytes).unwrap();
        }
        let res = heavy_on_deadline(&mut hs, &p, 5);
        let [(
            _,
            Outbound {
                payload: Payload::AggregateRelease { output, .. },
                ..
            },
        )] = &res.outbound[..]
        else {
            panic!("{res:?}")
        };
        let oracle = logged.iter().sum::<i64>() as f64 / 65536.0;
        assert_eq!(output.as_scalar().unwrap(), oracle);
    }

    #[test]
    fn histogram_vectors_merge() {
        let mut hs = heavies(&[10]);
        let edges: Vec<f64> = (0..=18).map(f64::from).collect();
        let mut p = sum_proposal(ThreatModel::PlaintextDP, vec![10], 1);
        p.map_spec = MapFnSpec::HistogramOf {
            field: "score".into(),
            bin_edges: edges.clone(),
        };
        p.output_schema = OutputSchema {
            fields: vec![SchemaField {
                name: "industry".into(),
                kind: FieldKind::Histogram { bin_edges: edges },
            }],
        };
        p.reduce_spec = ReduceFnSpec::HistogramMerge;
        p.epsilon = Some(1e9);
        let cats: Vec<f64> = (0..180).map(|i| (i % 18) as f64 + 0.5).collect();
        let mut lights = vec![light(1, &cats, PrivacyPolicy::default())];
        let out = run(&p, &mut lights, &mut hs, &BTreeMap::new());
        let [Payload::AggregateRelease {
            output: ReduceOutput::Vector(v),
            ..
        }] = &out[..]
        else {
            panic!("{out:?}")
        };
        assert_eq!(v, &vec![10.0; 18]);
    }

    #[test]
    fn reasons_roundtrip_through_text() {
        for r in [
            AbortReason::InsufficientParticipants {
                have: 400,
                need: 500,
            },
            AbortReason::QuorumFailure("reduce timeout".into()),
            AbortReason::NotImplemented("tee".into()),
        ] {
            assert_eq!(parse_reason(&r.to_string()), r);
        }
    }
}
