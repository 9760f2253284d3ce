use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Matrix;
use crate::error::{Error, Result};

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct FdConfig {
    /// Central-difference step, within `[1e-7, 1e-4]`.
    pub h: f64,
    /// Number of coordinates to probe (all of them if fewer exist).
    pub samples: usize,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples: 100,
            seed: 0,
        }
    }
}

/// Compares analytic gradients against central differences.
///
/// `loss_fn` maps parameters to `(loss, gradients)` with one gradient per
/// parameter matrix. Returns the maximum relative error over a seeded random
/// subsample of coordinates, using `max(|analytic|, |numeric|, 1e-8)` as the
/// denominator.
pub fn finite_diff_check<F>(mut loss_fn: F, params: &[Matrix], cfg: &FdConfig) -> Result<f64>
where
    F: FnMut(&[Matrix]) -> Result<(f64, Vec<Matrix>)>,
{
    if !(1e-7..=1e-4).contains(&cfg.h) {
        return Err(Error::invalid("h", format!("{} outside [1e-7, 1e-4]", cfg.h)));
    }
    let (f0, analytic) = loss_fn(params)?;
    let (f1, _) = loss_fn(params)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::NonDeterministic { first: f0, second: f1 });
    }
    if analytic.len() != params.len() || analytic.iter().zip(params).any(|(g, p)| !g.same_shape(p)) {
        return Err(Error::dims("finite_diff_check", "one gradient per parameter, same shapes", "mismatch"));
    }

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(k, p)| (0..p.len()).map(move |i| (k, i)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() <= cfg.samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, coords.len(), cfg.samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut worst: f64 = 0.0;
    let mut probe = params.to_vec();
    for (k, i) in chosen {
        let orig = probe[k].as_slice()[i];
        probe[k].as_mut_slice()[i] = orig + cfg.h;
        let (fp, _) = loss_fn(&probe)?;
        probe[k].as_mut_slice()[i] = orig - cfg.h;
        let (fm, _) = loss_fn(&probe)?;
        probe[k].as_mut_slice()[i] = orig;
        let numeric = (fp - fm) / (2.0 * cfg.h);
        let exact = analytic[k].as_slice()[i];
        let denom = exact.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    Ok(worst)
}
