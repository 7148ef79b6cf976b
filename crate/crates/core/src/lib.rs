//! Private map / secure reduce.
//!
//! Light nodes hold data and answer signed computation proposals locally,
//! under their own privacy policy. Heavy nodes collect protected
//! contributions (additive shares, Shamir shares, Paillier ciphertexts or
//! DP-noised plaintext) and release a single aggregate once the participant
//! threshold is met. Everything runs on a deterministic, seeded network
//! simulator so that whole-protocol runs are reproducible bit for bit.
//!
//! Module map:
//!
//! * [`proposal`]: computation objects, canonical encoding, signatures, schemas.
//! * [`transport`]: envelopes, the simulated network and gossip relay.
//! * [`policy`]: declarative privacy rules, manual approval, epsilon ledger.
//! * [`mapper`]: local map functions, Laplace noise, fixed-point encoding, mock data.
//! * [`reduce`]: share backends and the reduce-function registry.
//! * [`runtime`]: light and heavy node state machines.
//! * [`sim`]: scenario orchestration and reports.
//! * [`stats`]: descriptive statistics shared by reports and audits.

pub mod mapper;
pub mod policy;
pub mod proposal;
pub mod reduce;
pub mod runtime;
pub mod sim;
pub mod stats;
pub mod transport;

pub use mapper::{FixedPoint, LocalDataset, MapOutput};
pub use policy::{BudgetLedger, Decision, PrivacyPolicy, Rule};
pub use proposal::{
    ComputationId, ComputationProposal, MapFnSpec, OutputSchema, ReduceFnSpec, SignedProposal,
    ThreatModel,
};
pub use sim::{run_scenario, ScenarioConfig, ScenarioReport};
