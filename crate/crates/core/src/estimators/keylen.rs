//! Key-length estimation by non-linear regression of the rarefaction
//! curve R(n) = n_key·(1 − (1 − 1/n_key)^n).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::EstimateError;
use crate::detectors::fixed::{class_ids, rarefaction_counts};
use crate::detectors::RarefactionData;
use crate::rng::{mix, SplitMix64};
use crate::stats::bootstrap::percentile_ci;
use crate::stats::nls_fit_scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyLengthConfig {
    pub bootstrap_reps: usize,
    pub level: f64,
    /// Subsamples per grid point in bootstrap replicates.
    pub bootstrap_b: usize,
}

impl Default for KeyLengthConfig {
    fn default() -> Self {
        Self { bootstrap_reps: 200, level: 0.95, bootstrap_b: 10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyLengthEstimate {
    pub n_key_hat: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub sse: f64,
    pub distinct_responses: usize,
    /// Bootstrap replicates whose fit hit a bound and were dropped.
    pub bootstrap_failures: usize,
}

/// Expected number of distinct responses after n draws from n_key
/// equally likely outputs.
pub fn rarefaction_curve(n: f64, n_key: f64) -> f64 {
    if n_key <= 1.0 {
        return n_key.min(n);
    }
    n_key * -(n * (-1.0 / n_key).ln_1p()).exp_m1()
}

fn fit(pairs: &[(usize, usize)], n_total: usize, distinct: usize) -> Result<(f64, f64), EstimateError> {
    let xs: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
    let bounds = (1.0, 10.0 * n_total as f64);
    let init = (distinct as f64).clamp(bounds.0, bounds.1);
    let f = nls_fit_scalar(&xs, &ys, rarefaction_curve, init, bounds)?;
    let est = f.params[0];
    for b in [bounds.0, bounds.1] {
        if (est - b).abs() <= 1e-6 * b.max(1.0) {
            return Err(EstimateError::FitAtBound { estimate: est, bound: b });
        }
    }
    Ok((est, f.sse))
}

pub fn estimate_key_length(data: &RarefactionData, cfg: &KeyLengthConfig, seed: u64) -> Result<KeyLengthEstimate, EstimateError> {
    if data.unique_counts.len() < 2 || data.responses.len() < 2 {
        return Err(EstimateError::Input("rarefaction data has too few points".into()));
    }
    if cfg.bootstrap_reps == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) || cfg.bootstrap_b == 0 {
        return Err(EstimateError::Input("bootstrap_reps and bootstrap_b must be positive, level in (0, 1)".into()));
    }
    let (n_key_hat, sse) = fit(&data.unique_counts, data.n_total, data.distinct_total)?;
    let mut grid: Vec<usize> = data.unique_counts.iter().map(|p| p.0).collect();
    grid.dedup();
    let pool = &data.responses;
    let reps: Vec<Option<f64>> = (0..cfg.bootstrap_reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut g = SplitMix64::new(mix(seed, r));
            let sample: Vec<&str> = (0..pool.len()).map(|_| pool[g.next_below(pool.len() as u64) as usize].as_str()).collect();
            let (ids, k) = class_ids(&sample);
            let pairs = rarefaction_counts(&ids, k, &grid, cfg.bootstrap_b, mix(seed, r ^ 0xb007));
            fit(&pairs, data.n_total, k).ok().map(|f| f.0)
        })
        .collect();
    let ok: Vec<f64> = reps.iter().flatten().copied().collect();
    let ci = if ok.is_empty() { (f64::NAN, f64::NAN) } else { percentile_ci(&ok, cfg.level) };
    Ok(KeyLengthEstimate {
        n_key_hat,
        ci,
        level: cfg.level,
        sse,
        distinct_responses: data.distinct_total,
        bootstrap_failures: reps.len() - ok.len(),
    })
}
