//! Fixed-Sampling presence test via the rarefaction curve of response
//! diversity, plus the diversity audit used to choose the response length.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{median, to_value, DetectError, Evidence, QueryCost, TestReport};
use crate::blackbox::{BlackBoxHandle, DiversityProbe, SemanticQuery};
use crate::rng::{mix, SplitMix64};
use crate::schemes::Family;
use crate::stats::{mann_whitney_u, Alternative, PValueReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RarefactionConfig {
    pub prompt_id: usize,
    /// Response length in tokens (words for text adapters).
    pub t: usize,
    /// Number of responses collected.
    pub n: usize,
    pub grid_points: usize,
    /// Subsamples per grid point.
    pub b: usize,
    /// Query cap as a multiple of `n`.
    pub rejection_factor: usize,
}

impl Default for RarefactionConfig {
    fn default() -> Self {
        Self { prompt_id: 0, t: 50, n: 1000, grid_points: 20, b: 50, rejection_factor: 10 }
    }
}

impl RarefactionConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.t == 0 || self.n < 2 || self.grid_points == 0 || self.b == 0 {
            return Err(DetectError::Config("t, b and grid_points must be positive and N at least 2".into()));
        }
        Ok(())
    }

    /// `grid_points` evenly spaced sizes in [N/20, N].
    pub fn grid(&self) -> Vec<usize> {
        let lo = (self.n as f64 / 20.0).max(1.0);
        let hi = self.n as f64;
        let g = self.grid_points;
        let mut v: Vec<usize> = (0..g)
            .map(|i| if g == 1 { self.n } else { (lo + (hi - lo) * i as f64 / (g - 1) as f64).round() as usize })
            .map(|x| x.clamp(1, self.n))
            .collect();
        v.dedup();
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RarefactionData {
    pub t: usize,
    pub n_total: usize,
    /// Queries spent, including rejected short responses.
    pub q_total: u64,
    /// Response identities (first t tokens or words).
    pub responses: Vec<String>,
    /// (n, U) pairs from the Monte Carlo subsampling.
    pub unique_counts: Vec<(usize, usize)>,
    pub distinct_total: usize,
}

/// Class label per response, labels dense from 0.
pub fn class_ids<S: AsRef<str>>(responses: &[S]) -> (Vec<u32>, usize) {
    let mut map: HashMap<&str, u32> = HashMap::new();
    let ids = responses
        .iter()
        .map(|r| {
            let next = map.len() as u32;
            *map.entry(r.as_ref()).or_insert(next)
        })
        .collect();
    (ids, map.len())
}

/// For each n in `grid`, `b` uniform n-subsets (without replacement) and
/// the number of distinct classes in each.
pub fn rarefaction_counts(ids: &[u32], n_classes: usize, grid: &[usize], b: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    let mut stamp = vec![u32::MAX; n_classes];
    let mut out = Vec::with_capacity(grid.len() * b);
    let mut round = 0u32;
    for (gi, &n) in grid.iter().enumerate() {
        for r in 0..b {
            let mut g = SplitMix64::new(mix(seed, (gi * 1_000_003 + r) as u64));
            g.partial_shuffle(&mut idx, n);
            let mut u = 0;
            for &k in &idx[..n] {
                let c = ids[k] as usize;
                if stamp[c] != round {
                    stamp[c] = round;
                    u += 1;
                }
            }
            round = round.wrapping_add(1);
            if round == u32::MAX {
                stamp.iter_mut().for_each(|s| *s = u32::MAX);
                round = 0;
            }
            out.push((n, u));
        }
    }
    out
}

/// Collects N responses of exactly t tokens (shorter ones are discarded)
/// and Monte Carlo estimates of the rarefaction curve.
pub fn collect_rarefaction(model: &mut BlackBoxHandle, cfg: &RarefactionConfig, seed: u64) -> Result<RarefactionData, DetectError> {
    cfg.validate()?;
    let start = model.queries_used();
    let q = SemanticQuery::Diversity(DiversityProbe { prompt_id: cfg.prompt_id, target_length: cfg.t });
    let cap = (cfg.rejection_factor.max(1) * cfg.n) as u64;
    let mut responses = Vec::with_capacity(cfg.n);
    while responses.len() < cfg.n {
        let used = model.queries_used() - start;
        if used >= cap {
            return Err(DetectError::RetryBudget {
                what: format!("responses of length {}", cfg.t),
                valid: responses.len(),
                needed: cfg.n,
                attempts: used as usize,
            });
        }
        let r = model.ask(&q)?;
        if let Some(k) = r.content_key(cfg.t).filter(|_| r.valid) {
            responses.push(k);
        }
    }
    let (ids, classes) = class_ids(&responses);
    let unique_counts = rarefaction_counts(&ids, classes, &cfg.grid(), cfg.b, seed);
    Ok(RarefactionData {
        t: cfg.t,
        n_total: cfg.n,
        q_total: model.queries_used() - start,
        responses,
        unique_counts,
        distinct_total: classes,
    })
}

/// One-sided MWU: observed U values against the ideal curve R(n) = n.
pub fn rarefaction_pvalue(pairs: &[(usize, usize)]) -> Result<PValueReport, DetectError> {
    let observed: Vec<f64> = pairs.iter().map(|&(_, u)| u as f64).collect();
    let ideal: Vec<f64> = pairs.iter().map(|&(n, _)| n as f64).collect();
    Ok(mann_whitney_u(&observed, &ideal, Alternative::Less)?)
}

pub fn fixedsampling_test(model: &mut BlackBoxHandle, cfg: &RarefactionConfig, seed: u64) -> Result<TestReport, DetectError> {
    let data = collect_rarefaction(model, cfg, seed)?;
    let p = rarefaction_pvalue(&data.unique_counts)?;
    Ok(TestReport {
        family: Family::FixedSampling,
        p_value: p.p_value,
        statistic: p.statistic,
        query_cost: QueryCost { total: data.q_total, phase1: None, phase2: None },
        model_id: model.model_id(),
        seed,
        config: to_value(cfg),
        diagnostics: Some(serde_json::json!({ "method": p.method, "distinct_responses": data.distinct_total })),
        evidence: Evidence::Rarefaction(Box::new(data)),
        estimates: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerCheck {
    pub n_key: usize,
    pub reps: usize,
    pub level: f64,
    pub power: f64,
    pub median_p: f64,
}

/// Dry run: simulates the test on responses drawn uniformly from `n_key`
/// equally likely outputs, without issuing queries.
pub fn power_precheck(n_key: usize, cfg: &RarefactionConfig, reps: usize, level: f64, seed: u64) -> Result<PowerCheck, DetectError> {
    cfg.validate()?;
    if n_key == 0 || reps == 0 {
        return Err(DetectError::Config("n_key and reps must be positive".into()));
    }
    let mut ps = Vec::with_capacity(reps);
    for r in 0..reps as u64 {
        let mut g = SplitMix64::new(mix(seed, r));
        let ids: Vec<u32> = (0..cfg.n).map(|_| g.next_below(n_key as u64) as u32).collect();
        let pairs = rarefaction_counts(&ids, n_key, &cfg.grid(), cfg.b, mix(seed, r ^ 0x5555));
        ps.push(rarefaction_pvalue(&pairs)?.p_value);
    }
    let power = ps.iter().filter(|&&p| p < level).count() as f64 / reps as f64;
    Ok(PowerCheck { n_key, reps, level, power, median_p: median(&ps) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub temperature: f64,
    pub t: usize,
    pub n: usize,
    pub distinct: usize,
    pub gap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    /// α̂ with log(n − R(n)) ≈ c − α·t; None when diversity is saturated.
    pub alpha_hat: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub points: usize,
    pub saturated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityTable {
    pub rows: Vec<DiversityRow>,
    pub fits: Vec<(f64, SlopeFit)>,
}

/// Least-squares line through (t, log gap) over the points with gap > 0.
pub fn fit_diversity_slope(ts: &[usize], gaps: &[usize]) -> SlopeFit {
    let pts: Vec<(f64, f64)> =
        ts.iter().zip(gaps).filter(|(_, &g)| g > 0).map(|(&t, &g)| (t as f64, (g as f64).ln())).collect();
    let k = pts.len();
    let distinct_t = pts.iter().map(|p| p.0.to_bits()).collect::<std::collections::HashSet<_>>().len();
    if k < 2 || distinct_t < 2 {
        return SlopeFit { alpha_hat: None, intercept: None, r_squared: None, points: k, saturated: true };
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k as f64;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    SlopeFit { alpha_hat: Some(-slope), intercept: Some(my - slope * mx), r_squared: Some(r2), points: k, saturated: false }
}

/// Measures n − R(n) over a grid of lengths for each temperature and fits
/// the exponential decay rate. `make_model` builds a model at temperature T.
pub fn diversity_audit<F>(
    mut make_model: F,
    t_grid: &[usize],
    n: usize,
    temperatures: &[f64],
    prompt_id: usize,
) -> Result<DiversityTable, DetectError>
where
    F: FnMut(f64) -> Result<BlackBoxHandle, DetectError>,
{
    let t_max = *t_grid.iter().max().ok_or_else(|| DetectError::Config("empty length grid".into()))?;
    if n == 0 || t_grid.contains(&0) {
        return Err(DetectError::Config("n and every t must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    for &temp in temperatures {
        let mut model = make_model(temp)?;
        let q = SemanticQuery::Diversity(DiversityProbe { prompt_id, target_length: t_max });
        let mut pool = Vec::with_capacity(n);
        let mut attempts = 0;
        while pool.len() < n {
            if attempts >= 10 * n {
                return Err(DetectError::RetryBudget { what: "diversity responses".into(), valid: pool.len(), needed: n, attempts });
            }
            attempts += 1;
            let r = model.ask(&q)?;
            if r.valid && r.content_key(t_max).is_some() {
                pool.push(r);
            }
        }
        let mut gaps = Vec::with_capacity(t_grid.len());
        for &t in t_grid {
            let keys: Vec<String> = pool.iter().map(|r| r.content_key(t).expect("length checked")).collect();
            let (_, distinct) = class_ids(&keys);
            rows.push(DiversityRow { temperature: temp, t, n, distinct, gap: n - distinct });
            gaps.push(n - distinct);
        }
        fits.push((temp, fit_diversity_slope(t_grid, &gaps)));
    }
    Ok(DiversityTable { rows, fits })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_layout() {
        let g = RarefactionConfig::default().grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 50);
        assert_eq!(g[19], 1000);
    }

    #[test]
    fn counts_respect_bounds() {
        let ids: Vec<u32> = (0..200).map(|i| (i % 17) as u32).collect();
        let pairs = rarefaction_counts(&ids, 17, &[1, 10, 50, 200], 20, 3);
        for &(n, u) in &pairs {
            assert!(u <= n.min(17));
            if n == 1 {
                assert_eq!(u, 1);
            }
            if n == 200 {
                assert_eq!(u, 17);
            }
        }
    }

    #[test]
    fn ideal_diversity_is_not_rejected() {
        let ids: Vec<u32> = (0..1000).collect();
        let pairs = rarefaction_counts(&ids, 1000, &RarefactionConfig::default().grid(), 50, 1);
        assert!(pairs.iter().all(|&(n, u)| n == u));
        assert!(rarefaction_pvalue(&pairs).unwrap().p_value >= 0.5);
    }

    #[test]
    fn planted_slope_is_recovered() {
        let n = 1000.0f64;
        let ts: Vec<usize> = (0..=20).map(|i| i * 4).collect();
        let gaps: Vec<usize> = ts.iter().map(|&t| (n * (-0.05 * t as f64).exp()).floor() as usize).collect();
        let fit = fit_diversity_slope(&ts, &gaps);
        let a = fit.alpha_hat.unwrap();
        assert!((0.045..=0.055).contains(&a), "{a}");
        assert!(fit_diversity_slope(&[10, 20], &[0, 0]).saturated);
    }

    #[test]
    fn power_check_detects_small_keys() {
        let cfg = RarefactionConfig::default();
        assert_eq!(power_precheck(256, &cfg, 5, 0.05, 1).unwrap().power, 1.0);
        assert_eq!(power_precheck(1_000_000_000, &cfg, 5, 0.05, 1).unwrap().power, 0.0);
    }
}
