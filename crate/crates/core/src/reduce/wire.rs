//! Byte layouts for share submissions.
//!
//! Word submissions (additive, Shamir, plaintext):
//! `computation_id (16) | party (1) | count (2) | count x u64 BE`.
//! Ciphertext submissions:
//! `computation_id (16) | count (2) | count x (len u32 BE | bytes)`.

use super::paillier::HECiphertext;
use super::ReduceError;
use crate::proposal::ComputationId;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSubmission {
    pub computation_id: ComputationId,
    /// Party index for additive shares, the evaluation point for Shamir,
    /// zero for plaintext.
    pub party: u8,
    pub words: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CiphertextSubmission {
    pub computation_id: ComputationId,
    pub ciphertexts: Vec<HECiphertext>,
}

fn wire(msg: impl Into<String>) -> ReduceError {
    ReduceError::Wire(msg.into())
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ReduceError> {
        if self.buf.len() < n {
            return Err(wire("truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn id(&mut self) -> Result<ComputationId, ReduceError> {
        Ok(ComputationId(self.take(16)?.try_into().expect("16 bytes")))
    }

    fn u16(&mut self) -> Result<u16, ReduceError> {
        Ok(u16::from_be_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32, ReduceError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ReduceError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn finish(self) -> Result<(), ReduceError> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(wire("trailing bytes"))
        }
    }
}

impl WordSubmission {
    pub fn encode(&self) -> Result<Vec<u8>, ReduceError> {
        let count = u16::try_from(self.words.len()).map_err(|_| wire("too many words"))?;
        let mut out = Vec::with_capacity(19 + 8 * self.words.len());
        out.extend_from_slice(&self.computation_id.0);
        out.push(self.party);
        out.extend_from_slice(&count.to_be_bytes());
        for w in &self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ReduceError> {
        let mut c = Cursor { buf: bytes };
        let computation_id = c.id()?;
        let party = c.take(1)?[0];
        let count = c.u16()? as usize;
        let words = (0..count).map(|_| c.u64()).collect::<Result<_, _>>()?;
        c.finish()?;
        Ok(WordSubmission {
            computation_id,
            party,
            words,
        })
    }
}

impl CiphertextSubmission {
    pub fn encode(&self) -> Result<Vec<u8>, ReduceError> {
        let count =
            u16::try_from(self.ciphertexts.len()).map_err(|_| wire("too many ciphertexts"))?;
        let mut out = Vec::new();
        out.extend_from_slice(&self.computation_id.0);
        out.extend_from_slice(&count.to_be_bytes());
        for ct in &self.ciphertexts {
            let b = ct.to_bytes();
            let len = u32::try_from(b.len()).map_err(|_| wire("ciphertext too long"))?;
            out.extend_from_slice(&len.to_be_bytes());
            out.extend_from_slice(&b);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ReduceError> {
        let mut c = Cursor { buf: bytes };
        let computation_id = c.id()?;
        let count = c.u16()? as usize;
        let mut ciphertexts = Vec::with_capacity(count);
        for _ in 0..count {
            let len = c.u32()? as usize;
            ciphertexts.push(HECiphertext::from_bytes(c.take(len)?));
        }
        c.finish()?;
        Ok(CiphertextSubmission {
            computation_id,
            ciphertexts,
        })
    }
}

/// Reads only the computation id prefix common to both layouts.
pub fn peek_computation_id(bytes: &[u8]) -> Result<ComputationId, ReduceError> {
    Cursor { buf: bytes }.id()
}
