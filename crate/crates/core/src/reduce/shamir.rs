//! Shamir t-of-n sharing over a prime field, by default GF(2^61 - 1).

use rand::Rng;

use super::ReduceError;

/// 2^61 - 1.
pub const MERSENNE_61: u64 = (1 << 61) - 1;

/// Arithmetic modulo a prime below 2^63.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimeField {
    p: u64,
}

impl Default for PrimeField {
    fn default() -> Self {
        PrimeField { p: MERSENNE_61 }
    }
}

impl PrimeField {
    /// The caller vouches that `p` is prime.
    pub const fn new(p: u64) -> Self {
        PrimeField { p }
    }

    pub fn modulus(&self) -> u64 {
        self.p
    }

    pub fn add(&self, a: u64, b: u64) -> u64 {
        ((a as u128 + b as u128) % self.p as u128) as u64
    }

    pub fn sub(&self, a: u64, b: u64) -> u64 {
        self.add(a, self.p - b % self.p)
    }

    pub fn mul(&self, a: u64, b: u64) -> u64 {
        ((a as u128 * b as u128) % self.p as u128) as u64
    }

    pub fn pow(&self, mut base: u64, mut e: u64) -> u64 {
        let mut acc = 1 % self.p;
        base %= self.p;
        while e > 0 {
            if e & 1 == 1 {
                acc = self.mul(acc, base);
            }
            base = self.mul(base, base);
            e >>= 1;
        }
        acc
    }

    /// Inverse by Fermat; `a` must be nonzero.
    pub fn inv(&self, a: u64) -> u64 {
        self.pow(a, self.p - 2)
    }

    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        rng.gen_range(0..self.p)
    }

    /// Signed integer into the field (negatives wrap to the top half).
    pub fn from_signed(&self, v: i64) -> Result<u64, ReduceError> {
        let half = (self.p - 1) / 2;
        if v.unsigned_abs() > half {
            return Err(ReduceError::PlaintextOutOfRange);
        }
        Ok(if v < 0 {
            self.p - v.unsigned_abs()
        } else {
            v as u64
        })
    }

    /// Inverse of [`from_signed`](Self::from_signed).
    pub fn to_signed(&self, e: u64) -> i64 {
        if e > (self.p - 1) / 2 {
            -((self.p - e) as i64)
        } else {
            e as i64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ShamirShare {
    pub x: u64,
    pub y: u64,
}

/// Evaluates `coeffs[0] + coeffs[1] x + ...` at x = 1..=n.
pub fn evaluate_shares(field: &PrimeField, coeffs: &[u64], n: usize) -> Vec<ShamirShare> {
    (1..=n as u64)
        .map(|x| {
            let y = coeffs
                .iter()
                .rev()
                .fold(0, |acc, c| field.add(field.mul(acc, x), *c));
            ShamirShare { x, y }
        })
        .collect()
}

pub fn share_shamir<R: Rng + ?Sized>(
    secret: u64,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ShamirShare>, ReduceError> {
    share_shamir_in(&PrimeField::default(), secret, t, n, rng)
}

pub fn share_shamir_in<R: Rng + ?Sized>(
    field: &PrimeField,
    secret: u64,
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ShamirShare>, ReduceError> {
    if t < 1 || t > n || n as u64 >= field.modulus() {
        return Err(ReduceError::InvalidThreshold { t, n });
    }
    if secret >= field.modulus() {
        return Err(ReduceError::PlaintextOutOfRange);
    }
    let mut coeffs = Vec::with_capacity(t);
    coeffs.push(secret);
    coeffs.extend((1..t).map(|_| field.random(rng)));
    Ok(evaluate_shares(field, &coeffs, n))
}

pub fn reconstruct_shamir(shares: &[ShamirShare], t: usize) -> Result<u64, ReduceError> {
    reconstruct_shamir_in(&PrimeField::default(), shares, t)
}

/// Lagrange interpolation at zero over all supplied shares.
pub fn reconstruct_shamir_in(
    field: &PrimeField,
    shares: &[ShamirShare],
    t: usize,
) -> Result<u64, ReduceError> {
    if shares.len() < t || shares.is_empty() {
        return Err(ReduceError::InsufficientShares {
            have: shares.len(),
            need: t.max(1),
        });
    }
    for (i, a) in shares.iter().enumerate() {
        if a.x == 0 || a.x >= field.modulus() {
            return Err(ReduceError::InvalidEvaluationPoint(a.x));
        }
        if shares[..i].iter().any(|b| b.x == a.x) {
            return Err(ReduceError::DuplicateX(a.x));
        }
    }
    let mut secret = 0;
    for (i, si) in shares.iter().enumerate() {
        let mut num = 1;
        let mut den = 1;
        for (j, sj) in shares.iter().enumerate() {
            if i != j {
                // basis_i(0) = prod x_j / (x_j - x_i)
                num = field.mul(num, sj.x);
                den = field.mul(den, field.sub(sj.x, si.x));
            }
        }
        let basis = field.mul(num, field.inv(den));
        secret = field.add(secret, field.mul(si.y, basis));
    }
    Ok(secret)
}

pub fn add_shares_shamir(a: ShamirShare, b: ShamirShare) -> Result<ShamirShare, ReduceError> {
    add_shares_shamir_in(&PrimeField::default(), a, b)
}

pub fn add_shares_shamir_in(
    field: &PrimeField,
    a: ShamirShare,
    b: ShamirShare,
) -> Result<ShamirShare, ReduceError> {
    if a.x != b.x {
        return Err(ReduceError::EvaluationPointMismatch);
    }
    Ok(ShamirShare {
        x: a.x,
        y: field.add(a.y, b.y),
    })
}
