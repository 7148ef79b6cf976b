use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LocalDataset, MapError, Provenance};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MockMode {
    /// `k` records drawn without replacement.
    Subsample { k: usize, seed: u64 },
    /// Every field replaced by Normal(field mean, field sd) draws. Heavy
    /// tails of the real data are lost on purpose.
    Gaussianized { seed: u64 },
}

/// Derives the mock twin of a real dataset. Field bounds carry over.
pub fn derive_mock(real: &LocalDataset, mode: MockMode) -> Result<LocalDataset, MapError> {
    if real.is_empty() {
        return Err(MapError::EmptyDataset);
    }
    let rows = match mode {
        MockMode::Subsample { k, seed } => {
            if k > real.len() {
                return Err(MapError::InvalidMockSize {
                    requested: k,
                    available: real.len(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, real.len(), k)
                .into_iter()
                .map(|i| real.rows()[i].clone())
                .collect()
        }
        MockMode::Gaussianized { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = real.len() as f64;
            let dists = real
                .fields()
                .iter()
                .map(|f| {
                    let col = real.column(f)?;
                    let mean = col.iter().sum::<f64>() / n;
                    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                    Normal::new(mean, sd).map_err(|e| MapError::Parse(e.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (0..real.len())
                .map(|_| dists.iter().map(|d| d.sample(&mut rng)).collect())
                .collect()
        }
    };
    let mut mock = LocalDataset::from_columns(real.fields().to_vec(), rows, Provenance::Mock)?;
    for (f, (lo, hi)) in real.all_bounds() {
        mock.set_bounds(f, *lo, *hi);
    }
    Ok(mock.with_provenance(Provenance::Mock))
}
