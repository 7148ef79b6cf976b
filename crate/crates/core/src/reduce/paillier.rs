//! Paillier encryption: multiplying ciphertexts adds plaintexts mod n.
//!
//! Keys come from a single dealer and use the g = n + 1 variant with
//! equal-length primes, so λ = φ(n) and μ = φ(n)^-1 mod n.

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::Rng;

use super::ReduceError;

pub const MIN_MODULUS_BITS: u64 = 512;

const MR_ROUNDS: usize = 40;

const SMALL_PRIMES: [u32; 24] = [
    3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97,
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HEPublicKey {
    n: BigUint,
    n_squared: BigUint,
}

impl HEPublicKey {
    pub fn n(&self) -> &BigUint {
        &self.n
    }

    /// The generator, n + 1.
    pub fn generator(&self) -> BigUint {
        &self.n + 1u32
    }

    pub fn n_squared(&self) -> &BigUint {
        &self.n_squared
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HEPrivateKey {
    lambda: BigUint,
    mu: BigUint,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HEKeyPair {
    pub public: HEPublicKey,
    pub private: HEPrivateKey,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HECiphertext {
    pub c: BigUint,
}

impl HECiphertext {
    pub fn to_bytes(&self) -> Vec<u8> {
        self.c.to_bytes_be()
    }

    pub fn from_bytes(b: &[u8]) -> Self {
        HECiphertext {
            c: BigUint::from_bytes_be(b),
        }
    }
}

/// Miller-Rabin with random bases after trial division.
pub fn is_probable_prime<R: Rng + ?Sized>(n: &BigUint, rng: &mut R) -> bool {
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for p in SMALL_PRIMES.iter().chain(std::iter::once(&2)) {
        let p = BigUint::from(*p);
        if *n == p {
            return true;
        }
        if (n % &p).is_zero() {
            return false;
        }
    }
    let n_minus_1 = n - 1u32;
    let s = n_minus_1.trailing_zeros().unwrap_or(0);
    let d = &n_minus_1 >> s;
    'witness: for _ in 0..MR_ROUNDS {
        let a = rng.gen_biguint_range(&two, &n_minus_1);
        let mut x = a.modpow(&d, n);
        if x.is_one() || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

fn random_prime<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> BigUint {
    loop {
        let mut c = rng.gen_biguint(bits);
        // top two bits set so p*q has exactly 2*bits bits
        c.set_bit(bits - 1, true);
        c.set_bit(bits - 2, true);
        c.set_bit(0, true);
        if is_probable_prime(&c, rng) {
            return c;
        }
    }
}

pub fn he_keygen<R: Rng + ?Sized>(bits: u64, rng: &mut R) -> Result<HEKeyPair, ReduceError> {
    if bits < MIN_MODULUS_BITS || !bits.is_multiple_of(2) {
        return Err(ReduceError::KeySize(bits));
    }
    loop {
        let p = random_prime(bits / 2, rng);
        let q = random_prime(bits / 2, rng);
        if p == q {
            continue;
        }
        let n = &p * &q;
        let phi = (&p - 1u32) * (&q - 1u32);
        if !n.gcd(&phi).is_one() {
            continue;
        }
        let Some(mu) = phi.modinv(&n) else { continue };
        let n_squared = &n * &n;
        return Ok(HEKeyPair {
            public: HEPublicKey { n, n_squared },
            private: HEPrivateKey { lambda: phi, mu },
        });
    }
}

pub fn he_encrypt<R: Rng + ?Sized>(
    key: &HEPublicKey,
    m: &BigUint,
    rng: &mut R,
) -> Result<HECiphertext, ReduceError> {
    if *m >= key.n {
        return Err(ReduceError::PlaintextOutOfRange);
    }
    let r = loop {
        let r = rng.gen_biguint_range(&BigUint::one(), &key.n);
        if r.gcd(&key.n).is_one() {
            break r;
        }
    };
    // g^m = (1 + n)^m = 1 + m n (mod n^2)
    let gm = (BigUint::one() + m * &key.n) % &key.n_squared;
    let rn = r.modpow(&key.n, &key.n_squared);
    Ok(HECiphertext {
        c: gm * rn % &key.n_squared,
    })
}

fn check(key: &HEPublicKey, c: &HECiphertext) -> Result<(), ReduceError> {
    if c.c.is_zero() || c.c >= key.n_squared || !c.c.gcd(&key.n).is_one() {
        return Err(ReduceError::MalformedCiphertext);
    }
    Ok(())
}

/// Enc(a) * Enc(b) = Enc(a + b).
pub fn he_add(
    key: &HEPublicKey,
    a: &HECiphertext,
    b: &HECiphertext,
) -> Result<HECiphertext, ReduceError> {
    check(key, a)?;
    check(key, b)?;
    Ok(HECiphertext {
        c: &a.c * &b.c % &key.n_squared,
    })
}

/// Enc(a)^k = Enc(k a).
pub fn he_scalar_mul(
    key: &HEPublicKey,
    a: &HECiphertext,
    k: &BigUint,
) -> Result<HECiphertext, ReduceError> {
    check(key, a)?;
    Ok(HECiphertext {
        c: a.c.modpow(k, &key.n_squared),
    })
}

/// Encryption of zero with unit randomness, the identity for `he_add`.
pub fn he_zero() -> HECiphertext {
    HECiphertext { c: BigUint::one() }
}

pub fn he_decrypt(key: &HEKeyPair, c: &HECiphertext) -> Result<BigUint, ReduceError> {
    let pk = &key.public;
    check(pk, c)?;
    let u = c.c.modpow(&key.private.lambda, &pk.n_squared);
    let l = (u - 1u32) / &pk.n;
    Ok(l * &key.private.mu % &pk.n)
}

/// Signed integer into Z_n, negatives wrapping to the top half.
pub fn encode_signed(key: &HEPublicKey, v: i128) -> BigUint {
    let mag = BigUint::from(v.unsigned_abs());
    if v < 0 {
        &key.n - (mag % &key.n)
    } else {
        mag % &key.n
    }
}

/// Inverse of [`encode_signed`]; fails if the magnitude exceeds i128.
pub fn decode_signed(key: &HEPublicKey, m: &BigUint) -> Result<i128, ReduceError> {
    let half = &key.n >> 1;
    let (neg, mag) = if *m > half {
        (true, &key.n - m)
    } else {
        (false, m.clone())
    };
    let mag: u128 = mag
        .try_into()
        .map_err(|_| ReduceError::PlaintextOutOfRange)?;
    let mag = i128::try_from(mag).map_err(|_| ReduceError::PlaintextOutOfRange)?;
    Ok(if neg { -mag } else { mag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mapper::FixedPoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    fn key() -> &'static HEKeyPair {
        static KEY: OnceLock<HEKeyPair> = OnceLock::new();
        KEY.get_or_init(|| he_keygen(512, &mut ChaCha8Rng::seed_from_u64(512)).unwrap())
    }

    #[test]
    fn primality_of_small_numbers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sieve: Vec<u32> = (2..2000u32)
            .filter(|n| (2..*n).take_while(|d| d * d <= *n).all(|d| n % d != 0))
            .collect();
        for n in 0..2000u32 {
            assert_eq!(
                is_probable_prime(&BigUint::from(n), &mut rng),
                sieve.contains(&n),
                "{n}"
            );
        }
        // Carmichael numbers
        for c in [561u32, 1105, 1729, 2465, 2821, 6601, 8911] {
            assert!(!is_probable_prime(&BigUint::from(c), &mut rng));
        }
        // 2^61 - 1 and 2^89 - 1 are prime, 2^67 - 1 is not
        let m = |e: u32| (BigUint::one() << e) - 1u32;
        assert!(is_probable_prime(&m(61), &mut rng));
        assert!(is_probable_prime(&m(89), &mut rng));
        assert!(!is_probable_prime(&m(67), &mut rng));
    }

    #[test]
    fn key_shape() {
        let k = key();
        assert_eq!(k.public.n().bits(), 512);
        assert_eq!(k.public.generator(), k.public.n() + 1u32);
        assert!(he_keygen(256, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn zero_roundtrip_and_probabilistic() {
        let k = key();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = he_encrypt(&k.public, &BigUint::zero(), &mut rng).unwrap();
        let b = he_encrypt(&k.public, &BigUint::zero(), &mut rng).unwrap();
        assert_ne!(a, b);
        assert!(he_decrypt(k, &a).unwrap().is_zero());
        assert!(he_decrypt(k, &he_zero()).unwrap().is_zero());
    }

    #[test]
    fn thousand_random_pairs() {
        let k = key();
        let n = k.public.n();
        let mut rng = ChaCha8Rng::seed_from_u64(1000);
        for _ in 0..1000 {
            let a = rng.gen_biguint_below(n);
            let b = rng.gen_biguint_below(n);
            let ca = he_encrypt(&k.public, &a, &mut rng).unwrap();
            let cb = he_encrypt(&k.public, &b, &mut rng).unwrap();
            let sum = he_decrypt(k, &he_add(&k.public, &ca, &cb).unwrap()).unwrap();
            assert_eq!(sum, (a + b) % n);
        }
    }

    #[test]
    fn hundred_fixed_point_values() {
        let k = key();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let values: Vec<f64> = (0..100).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut acc = he_zero();
        let mut oracle: i128 = 0;
        for v in &values {
            let raw = FixedPoint::encode(*v).unwrap().signed();
            oracle += raw as i128;
            let c =
                he_encrypt(&k.public, &encode_signed(&k.public, raw as i128), &mut rng).unwrap();
            acc = he_add(&k.public, &acc, &c).unwrap();
        }
        let got = decode_signed(&k.public, &he_decrypt(k, &acc).unwrap()).unwrap();
        assert_eq!(got, oracle);
    }

    #[test]
    fn scalar_multiplication() {
        let k = key();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = he_encrypt(&k.public, &encode_signed(&k.public, -7), &mut rng).unwrap();
        let c5 = he_scalar_mul(&k.public, &c, &BigUint::from(5u32)).unwrap();
        assert_eq!(
            decode_signed(&k.public, &he_decrypt(k, &c5).unwrap()).unwrap(),
            -35
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = key();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            he_encrypt(&k.public, k.public.n(), &mut rng),
            Err(ReduceError::PlaintextOutOfRange)
        );
        let too_big = HECiphertext {
            c: k.public.n_squared().clone(),
        };
        assert_eq!(
            he_decrypt(k, &too_big),
            Err(ReduceError::MalformedCiphertext)
        );
        let not_coprime = HECiphertext {
            c: k.public.n().clone(),
        };
        assert_eq!(
            he_decrypt(k, &not_coprime),
            Err(ReduceError::MalformedCiphertext)
        );
    }

    #[test]
    fn ciphertext_bytes_roundtrip() {
        let k = key();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = he_encrypt(&k.public, &BigUint::from(77u32), &mut rng).unwrap();
        assert_eq!(HECiphertext::from_bytes(&c.to_bytes()), c);
    }
}
