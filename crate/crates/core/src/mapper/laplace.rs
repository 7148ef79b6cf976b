use rand::Rng;

use super::MapError;

/// One draw from Laplace(0, scale) by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        // u = -0.5 would give ln(0)
        if u > -0.5 {
            return -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        }
    }
}

/// `value + Laplace(0, sensitivity / epsilon)`.
pub fn apply_laplace<R: Rng + ?Sized>(
    value: f64,
    sensitivity: f64,
    epsilon: f64,
    rng: &mut R,
) -> Result<f64, MapError> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(MapError::InvalidEpsilon(epsilon));
    }
    if !(sensitivity.is_finite() && sensitivity > 0.0) {
        return Err(MapError::InvalidSensitivity(sensitivity));
    }
    Ok(value + sample_laplace(sensitivity / epsilon, rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vanishing_noise_at_huge_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let v = apply_laplace(42.0, 1.0, 1e9, &mut rng).unwrap();
            assert!((v - 42.0).abs() < 1e-6);
        }
    }

    #[test]
    fn deterministic_for_a_seed() {
        let a = apply_laplace(1.0, 1.0, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = apply_laplace(1.0, 1.0, 0.5, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            apply_laplace(0.0, 1.0, 0.0, &mut rng),
            Err(MapError::InvalidEpsilon(0.0))
        );
        assert!(apply_laplace(0.0, 1.0, f64::NAN, &mut rng).is_err());
        assert!(apply_laplace(0.0, -1.0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn sample_sd_matches_laplace_variance() {
        // Var = 2 b^2 with b = sensitivity / epsilon = 2
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| apply_laplace(0.0, 1.0, 0.5, &mut rng).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let expected = 2.0 * 2f64.sqrt();
        assert!((var.sqrt() - expected).abs() / expected < 0.05);
        // E|X| = b
        let mad = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        assert!((mad - 2.0).abs() < 0.05);
    }
}
