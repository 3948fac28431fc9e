//! Mood's median test.

use super::fisher::{fisher_exact, ContingencyTable2x2};
use super::{Method, PValueReport, StatsError};

/// Counts above vs. at-or-below the pooled median, then Fisher's exact test.
pub fn moods_median_test(a: &[f64], b: &[f64]) -> Result<PValueReport, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Input("empty sample".into()));
    }
    let mut pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    if pooled.iter().any(|x| !x.is_finite()) {
        return Err(StatsError::Input("non-finite value".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len();
    let med = if n % 2 == 1 { pooled[n / 2] } else { 0.5 * (pooled[n / 2 - 1] + pooled[n / 2]) };
    let above = |s: &[f64]| s.iter().filter(|&&x| x > med).count() as u64;
    let (aa, ba) = (above(a), above(b));
    let t = ContingencyTable2x2::new(aa, a.len() as u64 - aa, ba, b.len() as u64 - ba);
    let f = fisher_exact(t);
    Ok(PValueReport { p_value: f.p_value, method: Method::MoodMedian, ci: None, statistic: med, n_samples: n })
}
