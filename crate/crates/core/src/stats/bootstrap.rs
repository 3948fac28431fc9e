//! Nonparametric bootstrap with percentile and basic intervals.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::StatsError;
use crate::rng::{mix, SplitMix64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub estimates: Vec<f64>,
    pub ci: (f64, f64),
}

/// Type-7 quantile of an unsorted sample.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut s: Vec<f64> = xs.to_vec();
    s.sort_by(f64::total_cmp);
    percentile_sorted(&s, q)
}

fn percentile_sorted(s: &[f64], q: f64) -> f64 {
    if s.is_empty() {
        return f64::NAN;
    }
    let h = (s.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    s[lo] + (h - lo as f64) * (s[hi] - s[lo])
}

/// Resamples `data` with replacement `reps` times and applies `estimator`.
pub fn bootstrap<T, F>(data: &[T], estimator: F, reps: usize, level: f64, seed: u64) -> Result<BootstrapResult, StatsError>
where
    T: Clone + Send + Sync,
    F: Fn(&[T]) -> f64 + Sync,
{
    if reps == 0 {
        return Err(StatsError::Input("reps must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(StatsError::Input("empty data".into()));
    }
    let n = data.len() as u64;
    let estimates: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut g = SplitMix64::new(mix(seed, r));
            let sample: Vec<T> = (0..n).map(|_| data[g.next_below(n) as usize].clone()).collect();
            estimator(&sample)
        })
        .collect();
    let ci = percentile_ci(&estimates, level);
    Ok(BootstrapResult { estimates, ci })
}

/// Percentile interval of a set of replicate estimates.
pub fn percentile_ci(estimates: &[f64], level: f64) -> (f64, f64) {
    let mut s = estimates.to_vec();
    s.sort_by(f64::total_cmp);
    let tail = (1.0 - level) / 2.0;
    (percentile_sorted(&s, tail), percentile_sorted(&s, 1.0 - tail))
}

/// Basic (reverse percentile) interval [2θ̂ − q_hi, 2θ̂ − q_lo]. Unlike
/// the percentile interval it corrects for estimator bias that the
/// replicates reproduce.
pub fn basic_ci(estimate: f64, estimates: &[f64], level: f64) -> (f64, f64) {
    let (lo, hi) = percentile_ci(estimates, level);
    (2.0 * estimate - hi, 2.0 * estimate - lo)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Percentile,
    #[default]
    Basic,
}

impl CiMethod {
    pub fn interval(self, estimate: f64, estimates: &[f64], level: f64) -> (f64, f64) {
        match self {
            CiMethod::Percentile => percentile_ci(estimates, level),
            CiMethod::Basic => basic_ci(estimate, estimates, level),
        }
    }
}
