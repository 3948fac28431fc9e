//! Cache-Augmented variant classification from the two-phase choice
//! frequencies: δ-reweight answers deterministically once the cache is
//! reset, DiPmark moves p₁ by α.

use serde::{Deserialize, Serialize};

use super::EstimateError;
use crate::blackbox::BlackBoxHandle;
use crate::detectors::{cache_test, CacheTestConfig, CacheTestData, Evidence};
use crate::rng::mix;
use crate::stats::binom_ci;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheVariantClass {
    DeltaReweight,
    /// DiPmark, including γ-reweight at α = 0.5.
    DipmarkFamily,
    /// More repeats are needed before deciding.
    Undecided,
}

/// A run with p̂₂ = 0 decides δ-reweight only if k₂ = 0 has probability
/// below this level under the smallest DiPmark value p₂ = 2p₁ − 1, with p₁
/// at its one-sided lower confidence bound of the same level.
pub const ZERO_AMBIGUITY_LEVEL: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum AlphaInfo {
    Point(f64),
    LowerBound(f64),
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRunSummary {
    pub q1: usize,
    pub k1: usize,
    pub q2: usize,
    pub k2: usize,
    pub p1_hat: f64,
    pub p2_hat: f64,
    pub invalid_responses: usize,
}

impl From<&CacheTestData> for CacheRunSummary {
    fn from(d: &CacheTestData) -> Self {
        Self { q1: d.q1, k1: d.k1, q2: d.q2, k2: d.k2, p1_hat: d.p1_hat, p2_hat: d.p2_hat, invalid_responses: d.invalid_responses }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheVariantEstimate {
    pub variant: CacheVariantClass,
    pub alpha: AlphaInfo,
    /// α̂ = 0.5 is within the equality band, or the lower bound allows it.
    pub consistent_with_gamma_reweight: bool,
    pub runs: Vec<CacheRunSummary>,
    pub invalid_rate: f64,
    pub queries: u64,
}

impl CacheVariantEstimate {
    /// Point estimate if available, otherwise the lower bound.
    pub fn alpha_value(&self) -> Option<f64> {
        match self.alpha {
            AlphaInfo::Point(a) | AlphaInfo::LowerBound(a) => Some(a),
            AlphaInfo::None => None,
        }
    }
}

fn se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

fn alpha_from(run: &CacheRunSummary) -> (AlphaInfo, bool) {
    let (p1, p2) = (run.p1_hat, run.p2_hat);
    let band = 2.0 * se(p2, run.q2);
    if (p2 - (2.0 * p1 - 1.0)).abs() <= band {
        let bound = 1.0 - p1;
        (AlphaInfo::LowerBound(bound), bound < 0.5)
    } else {
        let a = (p1 - p2).abs();
        (AlphaInfo::Point(a), (a - 0.5).abs() <= band)
    }
}

fn zero_is_decisive(run: &CacheRunSummary) -> bool {
    let p1_lo = match binom_ci(run.k1 as u64, run.q1 as u64, 1.0 - 2.0 * ZERO_AMBIGUITY_LEVEL) {
        Ok((lo, _)) => lo,
        Err(_) => return false,
    };
    let floor = (2.0 * p1_lo - 1.0).clamp(0.0, 1.0);
    (run.q2 as f64 * (-floor).ln_1p()).exp() < ZERO_AMBIGUITY_LEVEL
}

/// Sequential case analysis over completed runs (p̂₁ ≥ 0.5 by
/// construction). The first run with p̂₂ ∈ (0, 1) means DiPmark; p̂₂ = 0
/// means δ-reweight unless DiPmark could also produce it; runs with p̂₂ = 1
/// or an ambiguous zero are repeated, and `k_repeats` such runs in a row
/// mean δ-reweight.
pub fn classify_from_runs(runs: &[CacheRunSummary], k_repeats: usize) -> CacheVariantEstimate {
    let mut variant = CacheVariantClass::Undecided;
    let mut alpha = AlphaInfo::None;
    let mut gamma = false;
    let mut used = runs.len();
    for (i, r) in runs.iter().enumerate() {
        if r.k2 > 0 && r.k2 < r.q2 {
            variant = CacheVariantClass::DipmarkFamily;
            (alpha, gamma) = alpha_from(r);
        } else if r.k2 == 0 && zero_is_decisive(r) {
            variant = CacheVariantClass::DeltaReweight;
        } else {
            continue;
        }
        used = i + 1;
        break;
    }
    if variant == CacheVariantClass::Undecided && runs.len() >= k_repeats {
        variant = CacheVariantClass::DeltaReweight;
    }
    let runs = &runs[..used];
    let q: usize = runs.iter().map(|r| r.q1 + r.q2 + r.invalid_responses).sum();
    let inv: usize = runs.iter().map(|r| r.invalid_responses).sum();
    CacheVariantEstimate {
        variant,
        alpha,
        consistent_with_gamma_reweight: gamma,
        runs: runs.to_vec(),
        invalid_rate: if q == 0 { 0.0 } else { inv as f64 / q as f64 },
        queries: 0,
    }
}

/// Repeats the two-phase procedure (fresh uc each time) until the case
/// analysis decides, at most `k_repeats` times. `first` reuses data from an
/// earlier cache test.
pub fn classify_cache_variant(
    model: &mut BlackBoxHandle,
    cfg: &CacheTestConfig,
    k_repeats: usize,
    seed: u64,
    first: Option<&CacheTestData>,
) -> Result<CacheVariantEstimate, EstimateError> {
    if k_repeats == 0 {
        return Err(EstimateError::Input("k_repeats must be at least 1".into()));
    }
    let start = model.queries_used();
    let mut runs: Vec<CacheRunSummary> = first.into_iter().map(CacheRunSummary::from).collect();
    let mut r = 0u64;
    loop {
        let est = classify_from_runs(&runs, k_repeats);
        if est.variant != CacheVariantClass::Undecided || runs.len() >= k_repeats {
            return Ok(CacheVariantEstimate { queries: model.queries_used() - start, ..est });
        }
        let rep = cache_test(model, cfg, mix(seed, r))?;
        r += 1;
        if let Evidence::Cache(d) = &rep.evidence {
            runs.push(CacheRunSummary::from(d.as_ref()));
        }
    }
}
