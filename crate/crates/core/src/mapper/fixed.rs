use serde::{Deserialize, Serialize};

use super::MapError;

/// Fractional bits of the encoding.
pub const FRAC_BITS: u32 = 16;
pub const SCALE: f64 = (1u64 << FRAC_BITS) as f64;
/// Encodable magnitudes are strictly below 2^47.
pub const MAX_ABS: f64 = (1u64 << 47) as f64;

/// A real number as `round(v * 2^16)` in two's complement, viewed as an
/// element of Z_(2^64). Addition of raw values mod 2^64 is addition of the
/// encoded reals as long as the true sum stays in range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct FixedPoint(u64);

impl FixedPoint {
    pub const fn from_raw(raw: u64) -> Self {
        FixedPoint(raw)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }

    /// Signed view of the raw value.
    pub const fn signed(self) -> i64 {
        self.0 as i64
    }

    /// Round-half-to-even on the scaled value.
    pub fn encode(value: f64) -> Result<Self, MapError> {
        if !value.is_finite() || value.abs() >= MAX_ABS {
            return Err(MapError::OutOfRange(value));
        }
        let scaled = (value * SCALE).round_ties_even();
        Ok(FixedPoint(scaled as i64 as u64))
    }

    pub fn decode(self) -> f64 {
        self.signed() as f64 / SCALE
    }

    pub fn wrapping_add(self, other: Self) -> Self {
        FixedPoint(self.0.wrapping_add(other.0))
    }
}

pub fn encode_fixed(value: f64) -> Result<FixedPoint, MapError> {
    FixedPoint::encode(value)
}

pub fn decode_fixed(fp: FixedPoint) -> f64 {
    fp.decode()
}
