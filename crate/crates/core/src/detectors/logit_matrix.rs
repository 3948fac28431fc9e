//! Collection of the N×M matrix of estimated logits l̂_{t1,t2}(x).

use serde::{Deserialize, Serialize};

use super::redgreen::RedGreenTestConfig;
use super::{ask_until_valid, DetectError};
use crate::blackbox::{BlackBoxHandle, ChoiceProbe, SemanticQuery};

/// Outcome of probing one candidate choice set in phase 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaProbe {
    pub choices: Vec<String>,
    pub queries: usize,
    pub valid: usize,
    pub modal_frequency: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major l̂ entries, rows indexed by t1 and columns by t2.
    pub entries: Vec<f64>,
    /// Valid responses per cell.
    pub counts: Vec<usize>,
    /// Per cell, how often each choice was picked.
    pub tallies: Vec<Vec<u64>>,
    /// Index of the target word x in `choices`.
    pub target: usize,
    pub choices: Vec<String>,
    pub prefixes: Vec<String>,
    pub digits: Vec<u8>,
    pub repeat: usize,
    pub sigma_probes: Vec<SigmaProbe>,
    pub phase1_queries: u64,
    pub phase2_queries: u64,
}

/// log(p/(1−p)) with p̂ ∈ {0, 1} moved to 1/(2n) or 1 − 1/(2n).
pub fn clamped_logit(k: u64, n: u64) -> f64 {
    let n = n.max(1) as f64;
    let p = (k as f64 / n).clamp(0.5 / n, 1.0 - 0.5 / n);
    (p / (1.0 - p)).ln()
}

impl LogitMatrix {
    /// Builds entries from per-cell tallies.
    pub fn from_tallies(
        rows: usize,
        cols: usize,
        tallies: Vec<Vec<u64>>,
        target: usize,
        choices: Vec<String>,
    ) -> Result<Self, DetectError> {
        if rows < 2 || cols < 2 || tallies.len() != rows * cols {
            return Err(DetectError::Config(format!("need a {rows}×{cols} tally grid with N, M ≥ 2")));
        }
        if tallies.iter().any(|t| t.len() != choices.len()) || target >= choices.len() {
            return Err(DetectError::Config("tally width does not match the choice set".into()));
        }
        let counts: Vec<usize> = tallies.iter().map(|t| t.iter().sum::<u64>() as usize).collect();
        let entries = tallies.iter().zip(&counts).map(|(t, &n)| clamped_logit(t[target], n as u64)).collect();
        Ok(Self {
            rows,
            cols,
            entries,
            counts,
            tallies,
            target,
            choices,
            prefixes: Vec::new(),
            digits: Vec::new(),
            repeat: 0,
            sigma_probes: Vec::new(),
            phase1_queries: 0,
            phase2_queries: 0,
        })
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    /// l̂ matrix for any word of the choice set.
    pub fn word_entries(&self, w: usize) -> Vec<f64> {
        self.tallies.iter().zip(&self.counts).map(|(t, &n)| clamped_logit(t[w], n as u64)).collect()
    }

    /// Same collection with replaced tallies (for resampling).
    pub fn with_tallies(&self, tallies: Vec<Vec<u64>>) -> Result<Self, DetectError> {
        let fresh = Self::from_tallies(self.rows, self.cols, tallies, self.target, self.choices.clone())?;
        Ok(Self { entries: fresh.entries, counts: fresh.counts, tallies: fresh.tallies, ..self.clone() })
    }

    /// All entries equal (e.g. the model always answers x).
    pub fn is_degenerate(&self) -> bool {
        self.entries.iter().all(|&e| e == self.entries[0])
    }
}

fn probe(cfg: &RedGreenTestConfig, choices: &[String], i: usize, j: usize) -> SemanticQuery {
    SemanticQuery::Choice(ChoiceProbe {
        prefix: cfg.prefixes[i].clone(),
        digit: cfg.digits[j],
        repeat: cfg.h_upper,
        choices: choices.to_vec(),
        perturb: None,
    })
}

/// Phase 1 picks a choice set the model does not always answer the same
/// way; phase 2 fills every (t1, t2) cell with `k` valid responses.
pub fn collect_logit_matrix(model: &mut BlackBoxHandle, cfg: &RedGreenTestConfig) -> Result<LogitMatrix, DetectError> {
    cfg.validate()?;
    let (n, m) = (cfg.n, cfg.m);
    let start = model.queries_used();
    let mut probes = Vec::new();
    let mut chosen = None;
    for cand in &cfg.sigma_candidates {
        let mut tally = vec![0u64; cand.len()];
        let mut valid = 0;
        for p in 0..cfg.phase1_probes {
            let r = model.ask(&probe(cfg, cand, p % n, p % m))?;
            if let (true, Some(c)) = (r.valid, r.parsed_choice) {
                tally[c] += 1;
                valid += 1;
            }
        }
        let (modal, &top) = tally.iter().enumerate().max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i))).expect("non-empty");
        let modal_frequency = if valid == 0 { 1.0 } else { top as f64 / valid as f64 };
        let valid_rate = valid as f64 / cfg.phase1_probes as f64;
        let accepted = valid > 0 && modal_frequency <= cfg.max_modal_frequency && valid_rate >= cfg.min_valid_rate;
        probes.push(SigmaProbe { choices: cand.clone(), queries: cfg.phase1_probes, valid, modal_frequency, accepted });
        if accepted {
            chosen = Some((cand.clone(), modal));
            break;
        }
    }
    let phase1_queries = model.queries_used() - start;
    let Some((choices, target)) = chosen else {
        let diag = probes
            .iter()
            .map(|p| format!("[{}]: modal {:.2}, valid {}/{}", p.choices.join(", "), p.modal_frequency, p.valid, p.queries))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(DetectError::NoViableSigma(diag));
    };

    let mut tallies = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            let q = probe(cfg, &choices, i, j);
            let what = format!("cell (t1={:?}, t2={})", cfg.prefixes[i], cfg.digits[j]);
            let rs = ask_until_valid(model, &q, cfg.k, cfg.retry_factor, &what)?;
            let mut t = vec![0u64; choices.len()];
            for r in rs {
                if let Some(c) = r.parsed_choice {
                    t[c] += 1;
                }
            }
            tallies.push(t);
        }
    }
    let mut lm = LogitMatrix::from_tallies(n, m, tallies, target, choices)?;
    lm.prefixes = cfg.prefixes[..n].to_vec();
    lm.digits = cfg.digits[..m].to_vec();
    lm.repeat = cfg.h_upper;
    lm.sigma_probes = probes;
    lm.phase1_queries = phase1_queries;
    lm.phase2_queries = model.queries_used() - start - phase1_queries;
    Ok(lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blackbox::{BlackBox, BlackBoxError, Response, Simulator, SimulatorConfig};

    #[test]
    fn logit_arithmetic_and_clamp() {
        assert!((clamped_logit(75, 100) - 3f64.ln()).abs() < 1e-12);
        assert!((clamped_logit(100, 100) - (0.995f64 / 0.005).ln()).abs() < 1e-12);
        assert!((clamped_logit(0, 100) + (0.995f64 / 0.005).ln()).abs() < 1e-12);
    }

    /// Always answers the first choice.
    struct Stubborn;
    impl BlackBox for Stubborn {
        fn id(&self) -> String {
            "stubborn".into()
        }
        fn ask(&mut self, _q: &SemanticQuery) -> Result<Response, BlackBoxError> {
            Ok(Response { text: None, tokens: None, parsed_choice: Some(0), valid: true, latency_ms: 0.0, token_count: 1 })
        }
        fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
            Ok(())
        }
    }

    #[test]
    fn constant_model_has_no_viable_sigma() {
        let mut h = BlackBoxHandle::new(Box::new(Stubborn));
        let e = collect_logit_matrix(&mut h, &RedGreenTestConfig::default()).unwrap_err();
        assert!(matches!(e, DetectError::NoViableSigma(_)));
    }

    #[test]
    fn constant_answers_give_degenerate_matrix() {
        let tallies = vec![vec![100, 0]; 6];
        let lm = LogitMatrix::from_tallies(2, 3, tallies, 0, vec!["a".into(), "b".into()]).unwrap();
        assert!(lm.is_degenerate());
        assert!((lm.entries[0] - (199.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn collects_full_matrix_on_simulator() {
        let mut h = BlackBoxHandle::new(Box::new(Simulator::new(SimulatorConfig::default()).unwrap()));
        let cfg = RedGreenTestConfig { n: 3, m: 4, k: 20, ..Default::default() };
        let lm = collect_logit_matrix(&mut h, &cfg).unwrap();
        assert_eq!(lm.entries.len(), 12);
        assert!(lm.counts.iter().all(|&c| c == 20));
        assert_eq!(lm.phase2_queries, 240);
        assert_eq!(lm.phase1_queries + lm.phase2_queries, h.queries_used());
    }
}
