//! Secure reduce: share backends and the reduce-function registry.

pub mod additive;
pub mod functions;
pub mod paillier;
pub mod shamir;
pub mod wire;

use thiserror::Error;

pub use additive::{
    add_shares_additive, reconstruct_additive, scale_share, share_additive, share_words,
    AdditiveShare,
};
pub use functions::{
    aggregate_frac_bits, apply_reduce, argmax_lowest, gac_ensemble, gini, theoretical_max,
    top_decile_share, ReduceOutput,
};
pub use paillier::{
    he_add, he_decrypt, he_encrypt, he_keygen, he_scalar_mul, he_zero, HECiphertext, HEKeyPair,
    HEPrivateKey, HEPublicKey,
};
pub use shamir::{
    add_shares_shamir, add_shares_shamir_in, reconstruct_shamir, reconstruct_shamir_in,
    share_shamir, share_shamir_in, PrimeField, ShamirShare, MERSENNE_61,
};
pub use wire::{CiphertextSubmission, WordSubmission};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ReduceError {
    #[error("missing share for party {0}")]
    MissingParty(u8),
    #[error("duplicate share for party {0}")]
    DuplicateParty(u8),
    #[error("party index {0} out of range")]
    InvalidParty(u8),
    #[error("shares belong to different parties")]
    PartyMismatch,
    #[error("invalid threshold t={t} n={n}")]
    InvalidThreshold { t: usize, n: usize },
    #[error("{have} shares, need {need}")]
    InsufficientShares { have: usize, need: usize },
    #[error("duplicate evaluation point {0}")]
    DuplicateX(u64),
    #[error("evaluation point {0} outside the field or zero")]
    InvalidEvaluationPoint(u64),
    #[error("shares evaluated at different points")]
    EvaluationPointMismatch,
    #[error("plaintext outside the message space")]
    PlaintextOutOfRange,
    #[error("malformed ciphertext")]
    MalformedCiphertext,
    #[error("modulus of {0} bits not supported")]
    KeySize(u64),
    #[error("mean is zero")]
    ZeroMean,
    #[error("no values")]
    Empty,
    #[error("total is zero")]
    ZeroTotal,
    #[error("negative or non-finite value")]
    NegativeValue,
    #[error("dimension mismatch")]
    DimensionMismatch,
    #[error("weights must be positive and finite")]
    InvalidWeights,
    #[error("wire format: {0}")]
    Wire(String),
}
