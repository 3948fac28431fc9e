//! Mann-Whitney U test with exact enumeration for small samples.

use serde::{Deserialize, Serialize};

use super::special::{norm_cdf, norm_sf};
use super::{Method, PValueReport, StatsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// `a` tends to be smaller than `b`.
    Less,
}

/// Largest |a|·|b| handled by exact enumeration.
pub const EXACT_LIMIT: usize = 400;

/// Mid-ranks (1-based) of the pooled sample plus the tie group sizes.
fn midranks(pooled: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let n = pooled.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && pooled[idx[j]] == pooled[idx[i]] {
            j += 1;
        }
        let r = (i + j + 1) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = r;
        }
        ties.push(j - i);
        i = j;
    }
    (ranks, ties)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<PValueReport, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Input("both samples must be non-empty".into()));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(StatsError::Input("non-finite value".into()));
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..na].iter().sum();
    let u = ra - (na * (na + 1)) as f64 / 2.0;
    let n = (na + nb) as f64;
    let mean = (na * nb) as f64 / 2.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (n * (n - 1.0)).max(1.0);
    let var = (na * nb) as f64 / 12.0 * ((n + 1.0) - tie_term);

    if var <= 0.0 {
        return Ok(PValueReport { p_value: 1.0, method: Method::MannWhitneyNormal, ci: None, statistic: u, n_samples: na + nb });
    }
    if na * nb <= EXACT_LIMIT {
        let p = exact_p(&ranks, na, u, mean, alternative);
        return Ok(PValueReport { p_value: p, method: Method::MannWhitneyExact, ci: None, statistic: u, n_samples: na + nb });
    }
    let sd = var.sqrt();
    let p = match alternative {
        Alternative::Less => norm_cdf((u - mean + 0.5) / sd),
        Alternative::TwoSided => {
            let z = ((u - mean).abs() - 0.5).max(0.0) / sd;
            (2.0 * norm_sf(z)).min(1.0)
        }
    };
    Ok(PValueReport { p_value: p.clamp(0.0, 1.0), method: Method::MannWhitneyNormal, ci: None, statistic: u, n_samples: na + nb })
}

/// Null distribution of the doubled rank sum of `a` over all equally likely
/// label assignments, exact with ties.
fn exact_p(ranks: &[f64], na: usize, u: f64, mean: f64, alternative: Alternative) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let smax: usize = doubled.iter().sum();
    // dp[k][s]: number of k-subsets with doubled rank sum s.
    let mut dp = vec![vec![0.0f64; smax + 1]; na + 1];
    dp[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=na).rev() {
            let (lower, upper) = dp.split_at_mut(k);
            let prev = &lower[k - 1];
            let cur = &mut upper[0];
            for s in (r..=smax).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let total: f64 = dp[na].iter().sum();
    let offset = (na * (na + 1)) as f64; // doubled na(na+1)/2
    let u2 = 2.0 * u;
    let mean2 = 2.0 * mean;
    let eps = 1e-9;
    let mut hit = 0.0;
    for (s, &cnt) in dp[na].iter().enumerate() {
        if cnt == 0.0 {
            continue;
        }
        let us2 = s as f64 - offset;
        let extreme = match alternative {
            Alternative::Less => us2 <= u2 + eps,
            Alternative::TwoSided => (us2 - mean2).abs() >= (u2 - mean2).abs() - eps,
        };
        if extreme {
            hit += cnt;
        }
    }
    (hit / total).clamp(0.0, 1.0)
}
