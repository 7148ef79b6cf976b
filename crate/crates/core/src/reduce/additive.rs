//! Three-party additive sharing over Z_(2^64).

use rand::Rng;

use super::ReduceError;

pub const PARTIES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AdditiveShare {
    /// 1..=3
    pub party_index: u8,
    pub raw: u64,
}

/// Splits `raw` into three shares. The first two are uniform draws; the
/// third makes the sum come out right.
pub fn share_additive<R: Rng + ?Sized>(raw: u64, rng: &mut R) -> [AdditiveShare; PARTIES] {
    let a: u64 = rng.gen();
    let b: u64 = rng.gen();
    let c = raw.wrapping_sub(a).wrapping_sub(b);
    [
        AdditiveShare {
            party_index: 1,
            raw: a,
        },
        AdditiveShare {
            party_index: 2,
            raw: b,
        },
        AdditiveShare {
            party_index: 3,
            raw: c,
        },
    ]
}

/// Shares every word of a vector; returns one vector per party.
pub fn share_words<R: Rng + ?Sized>(words: &[u64], rng: &mut R) -> [Vec<u64>; PARTIES] {
    let mut out: [Vec<u64>; PARTIES] = Default::default();
    for w in words {
        for (slot, s) in out.iter_mut().zip(share_additive(*w, rng)) {
            slot.push(s.raw);
        }
    }
    out
}

pub fn reconstruct_additive(shares: &[AdditiveShare]) -> Result<u64, ReduceError> {
    let mut seen = [false; PARTIES];
    for s in shares {
        let i = s.party_index as usize;
        if !(1..=PARTIES).contains(&i) {
            return Err(ReduceError::InvalidParty(s.party_index));
        }
        if seen[i - 1] {
            return Err(ReduceError::DuplicateParty(s.party_index));
        }
        seen[i - 1] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(ReduceError::MissingParty(missing as u8 + 1));
    }
    Ok(shares.iter().fold(0u64, |acc, s| acc.wrapping_add(s.raw)))
}

pub fn add_shares_additive(
    a: AdditiveShare,
    b: AdditiveShare,
) -> Result<AdditiveShare, ReduceError> {
    if a.party_index != b.party_index {
        return Err(ReduceError::PartyMismatch);
    }
    Ok(AdditiveShare {
        party_index: a.party_index,
        raw: a.raw.wrapping_add(b.raw),
    })
}

/// Multiplies a share by a public constant.
pub fn scale_share(a: AdditiveShare, k: u64) -> AdditiveShare {
    AdditiveShare {
        party_index: a.party_index,
        raw: a.raw.wrapping_mul(k),
    }
}
