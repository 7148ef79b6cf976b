//! Envelopes, a seeded discrete-event network and gossip relay.
//!
//! Time is integer ticks. Every send draws a latency and a drop decision
//! from one ChaCha stream, so the delivery schedule is a pure function of
//! the seed and the call sequence.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::proposal::{verify_proposal, ComputationId, SignedProposal};
use crate::reduce::ReduceOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("unknown address {0}")]
    UnknownAddress(u32),
    #[error("proposal signature does not verify")]
    InvalidSignature,
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("duplicate node index {0}")]
    DuplicateAddress(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeAddress {
    pub index: u32,
    pub pubkey: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Proposal {
        signed: SignedProposal,
        ttl: u32,
    },
    /// One contribution in a backend's wire layout.
    ShareSubmit {
        computation_id: ComputationId,
        bytes: Vec<u8>,
    },
    /// A holder's folded shares, sent to the combining quorum member.
    ReducePartial {
        computation_id: ComputationId,
        participants: u64,
        bytes: Vec<u8>,
    },
    AggregateRelease {
        computation_id: ComputationId,
        participants: u64,
        output: ReduceOutput,
    },
    Abort {
        computation_id: ComputationId,
        reason: String,
    },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Proposal { .. } => "proposal",
            Payload::ShareSubmit { .. } => "share_submit",
            Payload::ReducePartial { .. } => "reduce_partial",
            Payload::AggregateRelease { .. } => "aggregate_release",
            Payload::Abort { .. } => "abort",
        }
    }

    pub fn computation_id(&self) -> ComputationId {
        match self {
            Payload::Proposal { signed, .. } => signed.proposal.id,
            Payload::ShareSubmit { computation_id, .. }
            | Payload::ReducePartial { computation_id, .. }
            | Payload::AggregateRelease { computation_id, .. }
            | Payload::Abort { computation_id, .. } => *computation_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub from: u32,
    pub to: u32,
    pub payload: Payload,
    pub send_tick: u64,
    pub deliver_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub seed: u64,
    /// Inclusive per-hop delay range; the minimum is at least one tick.
    pub latency_min: u64,
    pub latency_max: u64,
    pub drop_rate: f64,
    pub fanout: usize,
    pub ttl: u32,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            seed: 0,
            latency_min: 1,
            latency_max: 3,
            drop_rate: 0.0,
            fanout: 4,
            ttl: 8,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        let bad = |m: &str| Err(TransportError::InvalidConfig(m.into()));
        if self.latency_min < 1 {
            return bad("latency_min must be >= 1");
        }
        if self.latency_min > self.latency_max {
            return bad("latency_min > latency_max");
        }
        if !(0.0..=1.0).contains(&self.drop_rate) {
            return bad("drop_rate outside [0, 1]");
        }
        if self.fanout == 0 {
            return bad("fanout must be positive");
        }
        Ok(())
    }
}

/// One delivered envelope as exported in traces.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub tick: u64,
    pub from: u32,
    pub to: u32,
    pub payload_kind: &'static str,
    pub computation_id: ComputationId,
}

pub struct Network {
    cfg: NetworkConfig,
    rng: ChaCha8Rng,
    /// Index into `nodes` by address index.
    slots: BTreeMap<u32, usize>,
    nodes: Vec<NodeAddress>,
    now: u64,
    seq: u64,
    queue: BTreeMap<(u64, u64), Envelope>,
    seen: Vec<BTreeSet<ComputationId>>,
    trace: Vec<TraceRecord>,
    sent: u64,
    dropped: u64,
    duplicates: u64,
}

impl Network {
    pub fn new(cfg: NetworkConfig, nodes: Vec<NodeAddress>) -> Result<Self, TransportError> {
        cfg.validate()?;
        let mut slots = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if slots.insert(n.index, i).is_some() {
                return Err(TransportError::DuplicateAddress(n.index));
            }
        }
        Ok(Network {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            slots,
            seen: vec![BTreeSet::new(); nodes.len()],
            nodes,
            now: 0,
            seq: 0,
            queue: BTreeMap::new(),
            trace: Vec::new(),
            sent: 0,
            dropped: 0,
            duplicates: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn nodes(&self) -> &[NodeAddress] {
        &self.nodes
    }

    pub fn address(&self, index: u32) -> Option<&NodeAddress> {
        self.slots.get(&index).map(|s| &self.nodes[*s])
    }

    fn slot(&self, index: u32) -> Result<usize, TransportError> {
        self.slots
            .get(&index)
            .copied()
            .ok_or(TransportError::UnknownAddress(index))
    }

    /// Enqueues one envelope, subject to random latency and loss.
    pub fn send_direct(
        &mut self,
        from: u32,
        to: u32,
        payload: Payload,
    ) -> Result<(), TransportError> {
        self.slot(from)?;
        self.slot(to)?;
        let latency = self
            .rng
            .gen_range(self.cfg.latency_min..=self.cfg.latency_max);
        let lost = self.rng.gen_bool(self.cfg.drop_rate);
        self.sent += 1;
        if lost {
            self.dropped += 1;
            return Ok(());
        }
        let env = Envelope {
            from,
            to,
            payload,
            send_tick: self.now,
            deliver_tick: self.now + latency,
        };
        self.queue.insert((env.deliver_tick, self.seq), env);
        self.seq += 1;
        Ok(())
    }

    /// Starts epidemic dissemination of `signed` from `origin`.
    pub fn broadcast_gossip(
        &mut self,
        origin: u32,
        signed: SignedProposal,
    ) -> Result<(), TransportError> {
        let slot = self.slot(origin)?;
        if !verify_proposal(&signed) {
            return Err(TransportError::InvalidSignature);
        }
        self.seen[slot].insert(signed.proposal.id);
        let ttl = self.cfg.ttl;
        self.forward(origin, &signed, ttl)
    }

    fn forward(
        &mut self,
        from: u32,
        signed: &SignedProposal,
        ttl: u32,
    ) -> Result<(), TransportError> {
        let slot = self.slot(from)?;
        let peers = self.nodes.len() - 1;
        let k = self.cfg.fanout.min(peers);
        for pick in sample(&mut self.rng, peers, k).into_vec() {
            // skip over our own slot
            let target = self.nodes[if pick >= slot { pick + 1 } else { pick }].index;
            self.send_direct(
                from,
                target,
                Payload::Proposal {
                    signed: signed.clone(),
                    ttl,
                },
            )?;
        }
        Ok(())
    }

    /// Advances the clock by one tick and returns the envelopes due at the
    /// new tick, in (delivery tick, enqueue order). Proposals a node has
    /// already seen are swallowed; first sightings are relayed onward while
    /// their ttl lasts.
    pub fn step(&mut self) -> Vec<Envelope> {
        self.now += 1;
        let mut out = Vec::new();
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 != self.now {
                debug_assert!(entry.key().0 > self.now);
                break;
            }
            let env = entry.remove();
            if let Payload::Proposal { signed, ttl } = &env.payload {
                let slot = self.slots[&env.to];
                if !self.seen[slot].insert(signed.proposal.id) {
                    self.duplicates += 1;
                    continue;
                }
                if *ttl > 0 {
                    let (signed, ttl) = (signed.clone(), ttl - 1);
                    self.forward(env.to, &signed, ttl)
                        .expect("receiver is a known address");
                }
            }
            self.trace.push(TraceRecord {
                tick: self.now,
                from: env.from,
                to: env.to,
                payload_kind: env.payload.kind(),
                computation_id: env.payload.computation_id(),
            });
            out.push(env);
        }
        out
    }

    /// True when nothing is in flight.
    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn has_seen(&self, node: u32, id: &ComputationId) -> bool {
        self.slots
            .get(&node)
            .is_some_and(|s| self.seen[*s].contains(id))
    }

    /// Marks `id` as seen at `node` (e.g. the originator of direct sends).
    pub fn mark_seen(&mut self, node: u32, id: ComputationId) -> Result<(), TransportError> {
        let s = self.slot(node)?;
        self.seen[s].insert(id);
        Ok(())
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// `tick,from,to,payload_kind,computation_id` per delivered envelope.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("tick,from,to,payload_kind,computation_id\n");
        for r in &self.trace {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.tick, r.from, r.to, r.payload_kind, r.computation_id
            );
        }
        s
    }

    /// SHA-256 of [`trace_csv`](Self::trace_csv), hex encoded.
    pub fn trace_hash(&self) -> String {
        hex::encode(Sha256::digest(self.trace_csv().as_bytes()))
    }

    /// (sent, dropped, duplicate proposals swallowed)
    pub fn counters(&self) -> (u64, u64, u64) {
        (self.sent, self.dropped, self.duplicates)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::proposal::fixtures::proposal;
    use crate::proposal::{sign_proposal, signing_key_from_seed};
    use proptest::prelude::*;
    use std::collections::VecDeque;

    fn addrs(n: u32) -> Vec<NodeAddress> {
        (0..n)
            .map(|index| NodeAddress {
                index,
                pubkey: [index as u8; 32],
            })
            .collect()
    }

    fn signed() -> SignedProposal {
        let key = signing_key_from_seed(&[3; 32]);
        let mut p = proposal();
        p.proposer = key.verifying_key().to_bytes();
        sign_proposal(p, &key).unwrap()
    }

    fn cfg(seed: u64) -> NetworkConfig {
        NetworkConfig {
            seed,
            ..NetworkConfig::default()
        }
    }

    fn drain(net: &mut Network) -> Vec<Envelope> {
        let mut all = Vec::new();
        while !net.is_idle() {
            all.extend(net.step());
        }
        all
    }

    #[test]
    fn ttl_zero_sends_fanout_only() {
        let c = NetworkConfig {
            ttl: 0,
            fanout: 3,
            ..cfg(1)
        };
        let mut net = Network::new(c, addrs(10)).unwrap();
        net.broadcast_gossip(0, signed()).unwrap();
        assert_eq!(net.pending(), 3);
        let got = drain(&mut net);
        assert_eq!(got.len(), 3);
        assert!(got.iter().all(|e| e.from == 0 && e.to != 0));
        assert_eq!(net.counters().0, 3);
    }

    /// Nodes reachable from `origin` by breadth-first search over the
    /// delivered proposal edges.
    fn bfs_reached(net: &Network, origin: u32) -> BTreeSet<u32> {
        let mut adj: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for r in net.trace() {
            assert_eq!(r.payload_kind, "proposal");
            adj.entry(r.from).or_default().push(r.to);
        }
        let mut reached = BTreeSet::from([origin]);
        let mut q = VecDeque::from([origin]);
        while let Some(u) = q.pop_front() {
            for v in adj.get(&u).into_iter().flatten() {
                if reached.insert(*v) {
                    q.push_back(*v);
                }
            }
        }
        reached
    }

    fn gossip_run(c: NetworkConfig, n: u32) -> (Network, ComputationId) {
        let s = signed();
        let id = s.proposal.id;
        let mut net = Network::new(c, addrs(n)).unwrap();
        net.broadcast_gossip(0, s).unwrap();
        drain(&mut net);
        (net, id)
    }

    #[test]
    fn seen_sets_match_reachability_oracle() {
        for seed in 0..20 {
            let (net, id) = gossip_run(cfg(seed), 60);
            let reached = bfs_reached(&net, 0);
            let seen: BTreeSet<u32> = (0..60).filter(|n| net.has_seen(*n, &id)).collect();
            assert_eq!(reached, seen, "seed {seed}");
        }
    }

    #[test]
    fn gossip_reaches_everyone_exactly_once() {
        // fanout 10 over 60 nodes: the random push graph is connected
        // for this seed and ttl 8 exceeds its diameter
        let c = NetworkConfig {
            fanout: 10,
            ..cfg(5)
        };
        let (net, id) = gossip_run(c, 60);
        assert_eq!(bfs_reached(&net, 0).len(), 60);
        let mut received: BTreeMap<u32, usize> = BTreeMap::new();
        for r in net.trace() {
            *received.entry(r.to).or_default() += 1;
        }
        for n in 0..60 {
            assert!(net.has_seen(n, &id));
            assert_eq!(received.get(&n).copied().unwrap_or(0), usize::from(n != 0));
        }
        assert!(
            net.counters().2 > 0,
            "duplicates were generated and dropped"
        );
    }

    #[test]
    fn complete_fanout_reaches_everyone_in_one_hop() {
        let c = NetworkConfig {
            fanout: 59,
            ttl: 0,
            ..cfg(1)
        };
        let (net, id) = gossip_run(c, 60);
        assert!((0..60).all(|n| net.has_seen(n, &id)));
        assert_eq!(net.trace().len(), 59);
    }

    #[test]
    fn total_loss_leaves_only_origin() {
        let s = signed();
        let id = s.proposal.id;
        let c = NetworkConfig {
            drop_rate: 1.0,
            ..cfg(1)
        };
        let mut net = Network::new(c, addrs(10)).unwrap();
        net.broadcast_gossip(4, s).unwrap();
        assert!(drain(&mut net).is_empty());
        for n in 0..10 {
            assert_eq!(net.has_seen(n, &id), n == 4);
        }
    }

    #[test]
    fn bad_signature_rejected() {
        let mut s = signed();
        s.signature[0] ^= 1;
        let mut net = Network::new(cfg(1), addrs(3)).unwrap();
        assert_eq!(
            net.broadcast_gossip(0, s),
            Err(TransportError::InvalidSignature)
        );
    }

    #[test]
    fn unit_latency_and_unknown_address() {
        let c = NetworkConfig {
            latency_min: 1,
            latency_max: 1,
            ..cfg(1)
        };
        let mut net = Network::new(c, addrs(2)).unwrap();
        let abort = |r: &str| Payload::Abort {
            computation_id: ComputationId::from_u128(1),
            reason: r.into(),
        };
        net.send_direct(0, 1, abort("a")).unwrap();
        net.send_direct(1, 0, abort("b")).unwrap();
        assert_eq!(
            net.send_direct(0, 9, abort("c")),
            Err(TransportError::UnknownAddress(9))
        );
        let got = net.step();
        assert_eq!(got.len(), 2);
        assert_eq!((got[0].send_tick, got[0].deliver_tick), (0, 1));
        // same tick: enqueue order
        assert_eq!(got[0].payload, abort("a"));
        assert_eq!(got[1].payload, abort("b"));
    }

    #[test]
    fn empty_step_advances_clock() {
        let mut net = Network::new(cfg(1), addrs(2)).unwrap();
        assert!(net.step().is_empty());
        assert!(net.step().is_empty());
        assert_eq!(net.now(), 2);
    }

    #[test]
    fn config_validation() {
        let bad = [
            NetworkConfig {
                latency_min: 0,
                ..cfg(0)
            },
            NetworkConfig {
                latency_min: 5,
                latency_max: 4,
                ..cfg(0)
            },
            NetworkConfig {
                drop_rate: 1.5,
                ..cfg(0)
            },
            NetworkConfig {
                fanout: 0,
                ..cfg(0)
            },
        ];
        for c in bad {
            assert!(Network::new(c, addrs(2)).is_err());
        }
        let mut dup = addrs(2);
        dup[1].index = 0;
        assert_eq!(
            Network::new(cfg(0), dup).err(),
            Some(TransportError::DuplicateAddress(0))
        );
    }

    #[test]
    fn half_loss_is_binomial() {
        let c = NetworkConfig {
            drop_rate: 0.5,
            ..cfg(42)
        };
        let mut net = Network::new(c, addrs(2)).unwrap();
        for _ in 0..10_000 {
            net.send_direct(
                0,
                1,
                Payload::Abort {
                    computation_id: ComputationId::from_u128(0),
                    reason: String::new(),
                },
            )
            .unwrap();
        }
        let delivered = net.pending() as f64;
        // n p = 5000, sd = sqrt(n p (1 - p)) = 50
        assert!((delivered - 5000.0).abs() <= 150.0, "{delivered}");
    }

    #[test]
    fn replay_gives_identical_trace_hash() {
        let run = |seed| {
            let mut net = Network::new(cfg(seed), addrs(40)).unwrap();
            net.broadcast_gossip(7, signed()).unwrap();
            drain(&mut net);
            net.trace_hash()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn trace_csv_format() {
        let c = NetworkConfig {
            latency_min: 2,
            latency_max: 2,
            ..cfg(1)
        };
        let mut net = Network::new(c, addrs(2)).unwrap();
        net.send_direct(
            1,
            0,
            Payload::Abort {
                computation_id: ComputationId::from_u128(0xab),
                reason: "x".into(),
            },
        )
        .unwrap();
        drain(&mut net);
        let csv = net.trace_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("tick,from,to,payload_kind,computation_id")
        );
        assert_eq!(
            lines.next(),
            Some(format!("2,1,0,abort,{}", ComputationId::from_u128(0xab)).as_str())
        );
    }

    proptest! {
        #[test]
        fn never_early(seed in any::<u64>(), lo in 1u64..5, span in 0u64..5, sends in 1usize..60) {
            let c = NetworkConfig { latency_min: lo, latency_max: lo + span, ..cfg(seed) };
            let mut net = Network::new(c, addrs(4)).unwrap();
            let mut delivered = 0;
            for i in 0..sends {
                net.send_direct((i % 4) as u32, ((i + 1) % 4) as u32, Payload::Abort {
                    computation_id: ComputationId::from_u128(i as u128),
                    reason: String::new(),
                }).unwrap();
                if i % 7 == 0 {
                    for e in net.step() {
                        prop_assert!(e.deliver_tick >= e.send_tick + lo);
                        prop_assert!(e.deliver_tick <= e.send_tick + lo + span);
                        delivered += 1;
                    }
                }
            }
            for e in drain(&mut net) {
                prop_assert!(e.deliver_tick >= e.send_tick + lo);
                delivered += 1;
            }
            prop_assert_eq!(delivered, sends);
        }

        #[test]
        fn gossip_dedup_holds(seed in any::<u64>(), n in 2u32..40, fanout in 1usize..6, ttl in 0u32..6) {
            let s = signed();
            let c = NetworkConfig { fanout, ttl, ..cfg(seed) };
            let mut net = Network::new(c, addrs(n)).unwrap();
            net.broadcast_gossip(0, s).unwrap();
            let got = drain(&mut net);
            let mut per_node = BTreeMap::new();
            for e in &got {
                *per_node.entry(e.to).or_insert(0) += 1;
            }
            prop_assert!(per_node.values().all(|c| *c == 1));
            prop_assert!(!per_node.contains_key(&0));
        }
    }
}
