use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};

use super::codec::{canonical_deserialize, canonical_serialize};
use super::{ComputationProposal, ProposalError};

pub const PUBLIC_KEY_LEN: usize = 32;
pub const SIGNATURE_LEN: usize = 64;

const SIGNED_MAGIC: &[u8; 4] = b"PMSR";

/// A proposal plus a detached Ed25519 signature over its canonical bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedProposal {
    pub proposal: ComputationProposal,
    pub signature: Vec<u8>,
}

pub fn signing_key_from_seed(seed: &[u8; 32]) -> SigningKey {
    SigningKey::from_bytes(seed)
}

/// Signs `proposal`. The proposal's `proposer` field must already hold the
/// matching public key, otherwise verification will fail.
pub fn sign_proposal(
    proposal: ComputationProposal,
    key: &SigningKey,
) -> Result<SignedProposal, ProposalError> {
    let msg = canonical_serialize(&proposal)?;
    let signature = key.sign(&msg).to_bytes().to_vec();
    Ok(SignedProposal {
        proposal,
        signature,
    })
}

/// True iff the signature verifies over the canonical encoding under the
/// proposal's own `proposer` key. Malformed input yields `false`.
pub fn verify_proposal(signed: &SignedProposal) -> bool {
    let Ok(msg) = canonical_serialize(&signed.proposal) else {
        return false;
    };
    let Ok(key) = VerifyingKey::from_bytes(&signed.proposal.proposer) else {
        return false;
    };
    let Ok(sig_bytes) = <[u8; SIGNATURE_LEN]>::try_from(signed.signature.as_slice()) else {
        return false;
    };
    key.verify_strict(&msg, &Signature::from_bytes(&sig_bytes))
        .is_ok()
}

/// File/wire form: `"PMSR" | u32 len | canonical proposal | 64-byte signature`.
pub fn encode_signed(signed: &SignedProposal) -> Result<Vec<u8>, ProposalError> {
    let body = canonical_serialize(&signed.proposal)?;
    let mut out = Vec::with_capacity(8 + body.len() + signed.signature.len());
    out.extend_from_slice(SIGNED_MAGIC);
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&signed.signature);
    Ok(out)
}

pub fn decode_signed(bytes: &[u8]) -> Result<SignedProposal, ProposalError> {
    if bytes.len() < 8 || &bytes[..4] != SIGNED_MAGIC {
        return Err(ProposalError::Malformed(
            "missing signed-proposal header".into(),
        ));
    }
    let len = u32::from_be_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body_end = 8usize
        .checked_add(len)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| ProposalError::Malformed("truncated proposal body".into()))?;
    let proposal = canonical_deserialize(&bytes[8..body_end])?;
    let signature = bytes[body_end..].to_vec();
    if signature.len() != SIGNATURE_LEN {
        return Err(ProposalError::Malformed(format!(
            "signature must be {SIGNATURE_LEN} bytes, got {}",
            signature.len()
        )));
    }
    Ok(SignedProposal {
        proposal,
        signature,
    })
}
