//! Cache-Augmented presence test: choice frequencies with a warm cache
//! (true distribution) against frequencies after a reset (watermarked).

use serde::{Deserialize, Serialize};

use super::{to_value, DetectError, Evidence, QueryCost, TestReport};
use crate::blackbox::{BlackBoxHandle, CacheProbe, SemanticQuery};
use crate::rng::{mix, SplitMix64};
use crate::schemes::Family;
use crate::stats::{fisher_exact, ContingencyTable2x2};

/// (f1, f2, example) triple.
pub type CacheCandidate = (String, String, String);

pub fn default_cache_candidates() -> Vec<CacheCandidate> {
    [
        ("apples", "pears", "plums"),
        ("cherries", "grapes", "figs"),
        ("lemons", "limes", "dates"),
        ("peaches", "mangoes", "kiwis"),
        ("oranges", "melons", "olives"),
        ("bananas", "berries", "guavas"),
        ("apricots", "papayas", "quinces"),
        ("lychees", "coconuts", "raisins"),
    ]
    .iter()
    .map(|(a, b, c)| (a.to_string(), b.to_string(), c.to_string()))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CacheTestConfig {
    pub q1: usize,
    pub q2: usize,
    /// Length of the uncommon prefix; defaults to 32 rare words when the
    /// adapter has them and 12 random 5-letter strings otherwise.
    pub uc_length: Option<usize>,
    pub candidates: Vec<CacheCandidate>,
    /// Accepted range of the modal frequency in phase 0.
    pub band: (f64, f64),
    pub probes: usize,
    pub retry_factor: usize,
}

impl Default for CacheTestConfig {
    fn default() -> Self {
        Self {
            q1: 75,
            q2: 75,
            uc_length: None,
            candidates: default_cache_candidates(),
            band: (0.5, 0.8),
            probes: 20,
            retry_factor: 10,
        }
    }
}

impl CacheTestConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        if self.q1 == 0 || self.q2 == 0 || self.probes == 0 {
            return Err(DetectError::Config("q1, q2 and probes must be positive".into()));
        }
        if self.candidates.is_empty() || self.candidates.iter().any(|c| c.0 == c.1) {
            return Err(DetectError::Config("need candidates with two distinct fruits".into()));
        }
        if !(0.0..=1.0).contains(&self.band.0) || self.band.0 > self.band.1 || self.band.1 > 1.0 {
            return Err(DetectError::Config("band must be a sub-interval of [0, 1]".into()));
        }
        if self.uc_length == Some(0) {
            return Err(DetectError::Config("uc_length must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase0Record {
    pub candidate: CacheCandidate,
    pub valid: usize,
    pub modal_frequency: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheTestData {
    pub uc: Vec<String>,
    /// (f1, f2) with f1 the phase-1 modal choice.
    pub choices: [String; 2],
    pub example: String,
    pub q1: usize,
    pub k1: usize,
    pub q2: usize,
    pub k2: usize,
    pub p1_hat: f64,
    pub p2_hat: f64,
    pub phase0: Vec<Phase0Record>,
    pub phase0_queries: u64,
    pub phase1_queries: u64,
    pub phase2_queries: u64,
    pub invalid_responses: usize,
}

/// Uncommon prefix: rare vocabulary words when available, else random
/// lowercase 5-letter strings.
pub fn make_uc(rare: Option<&[String]>, len: Option<usize>, seed: u64) -> Vec<String> {
    let mut g = SplitMix64::new(seed);
    match rare {
        Some(words) if !words.is_empty() => {
            let n = len.unwrap_or(32);
            let mut pool = words.to_vec();
            if n <= pool.len() {
                g.partial_shuffle(&mut pool, n);
                pool.truncate(n);
                pool
            } else {
                (0..n).map(|_| words[g.next_below(words.len() as u64) as usize].clone()).collect()
            }
        }
        _ => (0..len.unwrap_or(12))
            .map(|_| (0..5).map(|_| (b'a' + g.next_below(26) as u8) as char).collect())
            .collect(),
    }
}

fn probe(uc: &[String], c: &CacheCandidate) -> SemanticQuery {
    SemanticQuery::Cache(CacheProbe { uc: uc.to_vec(), choices: [c.0.clone(), c.1.clone()], example: c.2.clone() })
}

/// Counts of each choice over `n` valid answers. With `reset`, the cache is
/// cleared before every query.
fn tally(
    model: &mut BlackBoxHandle,
    q: &SemanticQuery,
    n: usize,
    reset: bool,
    retry_factor: usize,
    what: &str,
) -> Result<([usize; 2], usize), DetectError> {
    let mut counts = [0usize; 2];
    let mut invalid = 0;
    let cap = retry_factor.max(1) * n;
    let mut attempts = 0;
    while counts[0] + counts[1] < n {
        if attempts >= cap {
            return Err(DetectError::RetryBudget { what: what.into(), valid: counts[0] + counts[1], needed: n, attempts });
        }
        attempts += 1;
        if reset {
            model.reset_cache()?;
        }
        let r = model.ask(q)?;
        match (r.valid, r.parsed_choice) {
            (true, Some(c)) if c < 2 => counts[c] += 1,
            _ => invalid += 1,
        }
    }
    Ok((counts, invalid))
}

pub fn cache_test(model: &mut BlackBoxHandle, cfg: &CacheTestConfig, seed: u64) -> Result<TestReport, DetectError> {
    cfg.validate()?;
    let rare = model.rare_words();
    let uc = make_uc(rare.as_deref(), cfg.uc_length, mix(seed, 0x7563));
    let start = model.queries_used();

    // Phase 0: the first probe fills the cache and is discarded.
    let mut phase0 = Vec::new();
    let mut chosen = None;
    let mut invalid_responses = 0;
    for cand in &cfg.candidates {
        let q = probe(&uc, cand);
        model.ask(&q)?;
        let (c, inv) = tally(model, &q, cfg.probes, false, cfg.retry_factor, "phase-0 probes")?;
        invalid_responses += inv;
        let modal_frequency = c[0].max(c[1]) as f64 / cfg.probes as f64;
        let accepted = modal_frequency >= cfg.band.0 && modal_frequency <= cfg.band.1;
        phase0.push(Phase0Record { candidate: cand.clone(), valid: cfg.probes, modal_frequency, accepted });
        if accepted {
            chosen = Some(cand.clone());
            break;
        }
    }
    let phase0_queries = model.queries_used() - start;
    let Some(cand) = chosen else {
        let diag = phase0
            .iter()
            .map(|p| format!("({}, {}): modal {:.2}", p.candidate.0, p.candidate.1, p.modal_frequency))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DetectError::NoCandidatePair(diag));
    };

    // Phase 1: warm cache, the answers follow the unwatermarked distribution.
    let q = probe(&uc, &cand);
    model.ask(&q)?;
    let (c1, inv1) = tally(model, &q, cfg.q1, false, cfg.retry_factor, "phase-1 queries")?;
    let phase1_queries = model.queries_used() - start - phase0_queries;
    // Phase 2: a reset before every query forces the watermarked path.
    let (c2, inv2) = tally(model, &q, cfg.q2, true, cfg.retry_factor, "phase-2 queries")?;
    let phase2_queries = model.queries_used() - start - phase0_queries - phase1_queries;
    invalid_responses += inv1 + inv2;

    let f1 = if c1[1] > c1[0] { 1 } else { 0 };
    let (k1, k2) = (c1[f1], c2[f1]);
    let choices = if f1 == 0 { [cand.0.clone(), cand.1.clone()] } else { [cand.1.clone(), cand.0.clone()] };
    let p = fisher_exact(ContingencyTable2x2::new(k1 as u64, (cfg.q1 - k1) as u64, k2 as u64, (cfg.q2 - k2) as u64));
    let data = CacheTestData {
        uc,
        choices,
        example: cand.2.clone(),
        q1: cfg.q1,
        k1,
        q2: cfg.q2,
        k2,
        p1_hat: k1 as f64 / cfg.q1 as f64,
        p2_hat: k2 as f64 / cfg.q2 as f64,
        phase0,
        phase0_queries,
        phase1_queries,
        phase2_queries,
        invalid_responses,
    };
    Ok(TestReport {
        family: Family::CacheAugmented,
        p_value: p.p_value,
        statistic: p.statistic,
        query_cost: QueryCost {
            total: model.queries_used() - start,
            phase1: Some(phase0_queries + phase1_queries),
            phase2: Some(phase2_queries),
        },
        model_id: model.model_id(),
        seed,
        config: to_value(cfg),
        diagnostics: Some(serde_json::json!({
            "method": p.method,
            "p1_hat": data.p1_hat,
            "p2_hat": data.p2_hat,
            "invalid_responses": invalid_responses,
        })),
        evidence: Evidence::Cache(Box::new(data)),
        estimates: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{Simulator, SimulatorConfig};
    use crate::schemes::{CacheConfig, CacheVariant, SchemeConfig, WatermarkKey};

    fn handle(watermark: SchemeConfig, seed: u64) -> BlackBoxHandle {
        let mut cfg = SimulatorConfig { watermark, sample_seed: seed, ..Default::default() };
        cfg.model.seed = seed;
        BlackBoxHandle::new(Box::new(Simulator::new(cfg).unwrap()))
    }

    fn delta_reweight(seed: u64) -> SchemeConfig {
        SchemeConfig::Cache(CacheConfig::new(CacheVariant::DeltaReweight, 0.0, WatermarkKey::from_seed(seed, 64)))
    }

    #[test]
    fn uc_construction() {
        let rare: Vec<String> = (0..100).map(|i| format!("r{i}")).collect();
        let uc = make_uc(Some(&rare), None, 1);
        assert_eq!(uc.len(), 32);
        let set: std::collections::HashSet<_> = uc.iter().collect();
        assert_eq!(set.len(), 32);
        let text = make_uc(None, None, 1);
        assert_eq!(text.len(), 12);
        assert!(text.iter().all(|w| w.len() == 5 && w.bytes().all(|c| c.is_ascii_lowercase())));
        assert_eq!(make_uc(None, None, 1), text);
    }

    #[test]
    fn delta_reweight_is_detected() {
        let mut h = handle(delta_reweight(3), 3);
        let r = cache_test(&mut h, &CacheTestConfig::default(), 3).unwrap();
        let Evidence::Cache(d) = &r.evidence else { panic!() };
        assert!(d.k2 == 0 || d.k2 == d.q2, "δ-reweight is deterministic after reset");
        assert!(r.p_value < 1e-6, "p = {}", r.p_value);
        assert_eq!(r.query_cost.total, h.queries_used());
    }

    #[test]
    fn unwatermarked_is_not_rejected_in_median() {
        let mut ps: Vec<f64> = (0..9)
            .map(|s| {
                let mut h = handle(SchemeConfig::None, 100 + s);
                cache_test(&mut h, &CacheTestConfig::default(), s).unwrap().p_value
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        assert!(ps[4] >= 0.05, "{ps:?}");
    }

    #[test]
    fn empty_band_reports_candidates() {
        let mut h = handle(SchemeConfig::None, 1);
        let cfg = CacheTestConfig { band: (1.0, 1.0), candidates: default_cache_candidates()[..2].to_vec(), ..Default::default() };
        let e = cache_test(&mut h, &cfg, 1).unwrap_err();
        assert!(matches!(e, DetectError::NoCandidatePair(ref s) if s.contains("apples")));
    }
}
