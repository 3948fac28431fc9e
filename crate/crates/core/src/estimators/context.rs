//! Context-size estimation: a perturbation digit d' placed at distance H
//! from the generated token changes the output distribution only while it
//! is inside the watermark's context window.

use serde::{Deserialize, Serialize};

use super::EstimateError;
use crate::blackbox::{BlackBoxHandle, ChoiceProbe, SemanticQuery};
use crate::detectors::ask_until_valid;
use crate::stats::moods_median_test;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContextSizeConfig {
    /// Fixed prefix t1.
    pub prefix: String,
    /// Fixed digit d outside robust mode.
    pub digit: u8,
    /// Largest H probed.
    pub h_max: usize,
    /// Perturbation digits are (d + offset) mod 10.
    pub perturb_offsets: Vec<u8>,
    /// Valid responses per (H, d').
    pub k: usize,
    /// Responses per log-probability estimate.
    pub batch: usize,
    /// Rejection level per H.
    pub level: f64,
    /// Test the log-probability of every word of Σ (Bonferroni over words)
    /// instead of the target alone.
    pub all_words: bool,
    /// Repeat over `robust_digits` and take the median.
    pub robust: bool,
    pub robust_digits: Vec<u8>,
    pub retry_factor: usize,
}

impl Default for ContextSizeConfig {
    fn default() -> Self {
        Self {
            prefix: "I bought".into(),
            digit: 7,
            h_max: 5,
            perturb_offsets: vec![1, 2],
            k: 500,
            batch: 25,
            level: 0.01,
            all_words: true,
            robust: false,
            robust_digits: (0..10).collect(),
            retry_factor: 10,
        }
    }
}

impl ContextSizeConfig {
    fn validate(&self) -> Result<(), EstimateError> {
        let bad = |m: &str| Err(EstimateError::Input(m.into()));
        if self.h_max == 0 || self.k == 0 || self.batch == 0 || self.k < 2 * self.batch {
            return bad("h_max, k and batch must be positive with at least two batches");
        }
        if self.perturb_offsets.len() < 2 || self.perturb_offsets.iter().any(|&o| o % 10 == 0) {
            return bad("need at least two non-zero perturbation offsets");
        }
        if self.digit > 9 || self.robust_digits.iter().any(|&d| d > 9) || (self.robust && self.robust_digits.is_empty()) {
            return bad("digits must be 0-9");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return bad("level must be in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DigitRun {
    pub digit: u8,
    pub perturb: Vec<u8>,
    /// Smallest pairwise Mood p-value per H = 1..=h_max, Bonferroni
    /// adjusted over the words tested.
    pub p_values: Vec<f64>,
    pub h_hat: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSizeEstimate {
    /// Largest H whose test rejected; None if no H rejected.
    pub h_hat: Option<usize>,
    pub h_max: usize,
    pub robust: bool,
    pub runs: Vec<DigitRun>,
    pub queries: u64,
}

impl ContextSizeEstimate {
    pub fn describe(&self) -> String {
        match self.h_hat {
            Some(h) => format!("h = {h}"),
            None => format!("no rejection for H in 1..={} (no context dependence, or h ≥ {})", self.h_max, self.h_max),
        }
    }
}

/// log p̂(x) per batch of responses, clamped away from 0 and 1.
fn batch_logprobs(picks: &[Option<usize>], target: usize, batch: usize) -> Vec<f64> {
    picks
        .chunks_exact(batch)
        .map(|c| {
            let k = c.iter().filter(|&&p| p == Some(target)).count() as f64;
            let n = batch as f64;
            (k / n).clamp(0.5 / n, 1.0 - 0.5 / n).ln()
        })
        .collect()
}

fn run_digit(
    model: &mut BlackBoxHandle,
    cfg: &ContextSizeConfig,
    choices: &[String],
    target: usize,
    digit: u8,
) -> Result<DigitRun, EstimateError> {
    let perturb: Vec<u8> = cfg.perturb_offsets.iter().map(|&o| (digit + o) % 10).collect();
    let mut p_values = Vec::with_capacity(cfg.h_max);
    for h in 1..=cfg.h_max {
        let words: Vec<usize> = if cfg.all_words { (0..choices.len()).collect() } else { vec![target] };
        let mut picks = Vec::with_capacity(perturb.len());
        for &dp in &perturb {
            let q = SemanticQuery::Choice(ChoiceProbe {
                prefix: cfg.prefix.clone(),
                digit,
                repeat: h - 1,
                choices: choices.to_vec(),
                perturb: Some(dp),
            });
            let what = format!("context probe H={h}, d'={dp}");
            let rs = ask_until_valid(model, &q, cfg.k, cfg.retry_factor, &what)?;
            picks.push(rs.iter().map(|r| r.parsed_choice).collect::<Vec<_>>());
        }
        let mut p = 1.0f64;
        for &w in &words {
            let samples: Vec<Vec<f64>> = picks.iter().map(|pk| batch_logprobs(pk, w, cfg.batch)).collect();
            for a in 0..samples.len() {
                for b in a + 1..samples.len() {
                    p = p.min(moods_median_test(&samples[a], &samples[b])?.p_value);
                }
            }
        }
        let p = (p * words.len() as f64).min(1.0);
        p_values.push(p);
    }
    let h_hat = p_values.iter().rposition(|&p| p < cfg.level).map(|i| i + 1);
    Ok(DigitRun { digit, perturb, p_values, h_hat })
}

/// Probes H = 1..=h_max with perturbation digits and reports the largest H
/// at which the perturbation still changes the answer distribution (of
/// `target` only, unless `all_words`).
/// Robust mode repeats this for each digit d and takes the median.
pub fn estimate_context_size(
    model: &mut BlackBoxHandle,
    cfg: &ContextSizeConfig,
    choices: &[String],
    target: usize,
) -> Result<ContextSizeEstimate, EstimateError> {
    cfg.validate()?;
    if choices.len() < 2 || target >= choices.len() {
        return Err(EstimateError::Input("need a choice set of at least two words containing the target".into()));
    }
    let start = model.queries_used();
    let digits = if cfg.robust { cfg.robust_digits.clone() } else { vec![cfg.digit] };
    let runs = digits.iter().map(|&d| run_digit(model, cfg, choices, target, d)).collect::<Result<Vec<_>, _>>()?;
    let mut hs: Vec<usize> = runs.iter().map(|r| r.h_hat.unwrap_or(0)).collect();
    hs.sort_unstable();
    let med = hs[hs.len() / 2];
    Ok(ContextSizeEstimate {
        h_hat: (med > 0).then_some(med),
        h_max: cfg.h_max,
        robust: cfg.robust,
        runs,
        queries: model.queries_used() - start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{Simulator, SimulatorConfig};
    use crate::schemes::{RedGreenConfig, RedGreenVariant, SchemeConfig};

    fn fruits() -> Vec<String> {
        ["apples", "pears", "plums", "figs"].iter().map(|s| s.to_string()).collect()
    }

    fn handle(watermark: SchemeConfig, seed: u64) -> BlackBoxHandle {
        let mut cfg = SimulatorConfig { watermark, sample_seed: seed, ..Default::default() };
        cfg.model.seed = seed;
        BlackBoxHandle::new(Box::new(Simulator::new(cfg).unwrap()))
    }

    #[test]
    fn lefthash_context_is_one() {
        let wm = SchemeConfig::RedGreen(RedGreenConfig::new(RedGreenVariant::LeftHash, 2.0, 0.25, vec![77]));
        let mut h = handle(wm, 5);
        let cfg = ContextSizeConfig { robust: true, ..Default::default() };
        let est = estimate_context_size(&mut h, &cfg, &fruits(), 0).unwrap();
        assert_eq!(est.h_hat, Some(1), "{:?}", est.runs);
        assert_eq!(est.queries, 10 * 5 * 2 * 500);
    }

    #[test]
    fn unwatermarked_has_no_rejection() {
        let mut h = handle(SchemeConfig::None, 6);
        let est = estimate_context_size(&mut h, &ContextSizeConfig::default(), &fruits(), 0).unwrap();
        assert_eq!(est.h_hat, None);
        assert!(est.describe().contains("no rejection"));
    }

    #[test]
    fn batches_are_clamped() {
        let picks = vec![Some(0); 10];
        let v = batch_logprobs(&picks, 0, 5);
        assert_eq!(v.len(), 2);
        assert!((v[0] - (0.9f64).ln()).abs() < 1e-12);
    }
}
