//! Red-Green presence test: flag cells whose logit deviates from the row
//! median by more than r·σ̂, count flags per column, and compare the spread
//! of counts against random permutations of the matrix.

use serde::{Deserialize, Serialize};

use super::logit_matrix::{collect_logit_matrix, LogitMatrix};
use super::{median, to_value, DetectError, Evidence, QueryCost, TestReport};
use crate::blackbox::BlackBoxHandle;
use crate::rng::{mix, SplitMix64};
use crate::schemes::Family;
use crate::stats::{permutation_test, PValueReport};

pub const DEFAULT_PREFIXES: [&str; 12] = [
    "I bought", "We picked", "You ate", "They saw", "She sold", "He wanted", "My friend found", "Our mother carried",
    "I washed", "We cooked", "They grew", "She counted",
];

pub fn default_sigma_candidates() -> Vec<Vec<String>> {
    [
        ["apples", "pears", "plums", "figs"],
        ["cherries", "grapes", "lemons", "limes"],
        ["bananas", "mangoes", "peaches", "kiwis"],
        ["melons", "berries", "apricots", "dates"],
        ["oranges", "guavas", "papayas", "olives"],
    ]
    .iter()
    .map(|c| c.iter().map(|s| s.to_string()).collect())
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RedGreenTestConfig {
    /// Number of prefixes t1 (rows).
    pub n: usize,
    /// Number of digits t2 (columns).
    pub m: usize,
    /// Valid responses per cell.
    pub k: usize,
    pub r: f64,
    pub n_perm: usize,
    pub ci_level: f64,
    /// Upper bound H on the context size; the digit is repeated H times.
    pub h_upper: usize,
    pub prefixes: Vec<String>,
    pub digits: Vec<u8>,
    pub sigma_candidates: Vec<Vec<String>>,
    pub phase1_probes: usize,
    pub max_modal_frequency: f64,
    pub min_valid_rate: f64,
    pub retry_factor: usize,
    /// If set, report the median p over this many per-cell resamples.
    pub bootstrap_reps: Option<usize>,
}

impl Default for RedGreenTestConfig {
    fn default() -> Self {
        Self {
            n: 10,
            m: 9,
            k: 100,
            r: 1.96,
            n_perm: 10_000,
            ci_level: 0.99,
            h_upper: 4,
            prefixes: DEFAULT_PREFIXES.iter().map(|s| s.to_string()).collect(),
            digits: (1..=9).collect(),
            sigma_candidates: default_sigma_candidates(),
            phase1_probes: 20,
            max_modal_frequency: 0.9,
            min_valid_rate: 0.5,
            retry_factor: 10,
            bootstrap_reps: None,
        }
    }
}

impl RedGreenTestConfig {
    pub fn validate(&self) -> Result<(), DetectError> {
        let bad = |m: String| Err(DetectError::Config(m));
        if self.n < 2 || self.m < 2 {
            return bad(format!("N={} and M={} must be at least 2", self.n, self.m));
        }
        if self.prefixes.len() < self.n || self.digits.len() < self.m {
            return bad(format!("need {} prefixes and {} digits", self.n, self.m));
        }
        if self.digits.iter().any(|&d| d > 9) {
            return bad("digits must be 0-9".into());
        }
        if !(self.r > 0.0) || self.k == 0 || self.h_upper == 0 || self.phase1_probes == 0 {
            return bad("r, K, H and phase1_probes must be positive".into());
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return bad(format!("ci_level {} outside (0,1)", self.ci_level));
        }
        if self.sigma_candidates.is_empty() || self.sigma_candidates.iter().any(|c| c.len() < 2) {
            return bad("every choice-set candidate needs at least two words".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RedGreenFlags {
    pub sigma: f64,
    /// Row-major R_x flags.
    pub red: Vec<bool>,
    /// Row-major G_x flags.
    pub green: Vec<bool>,
    /// cnt_x(t2) per column.
    pub cnt: Vec<usize>,
    /// Every column carries the same non-empty flag pattern.
    pub identical_columns: bool,
}

fn median_small(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 { buf[n / 2] } else { 0.5 * (buf[n / 2 - 1] + buf[n / 2]) }
}

/// Row-median-centred deviations and the noise scale σ̂.
fn deviations(entries: &[f64], rows: usize, cols: usize, dev: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
    for i in 0..rows {
        let row = &entries[i * cols..(i + 1) * cols];
        scratch.clear();
        scratch.extend_from_slice(row);
        let med = median_small(scratch);
        for j in 0..cols {
            dev[i * cols + j] = row[j] - med;
        }
    }
    // σ̂² = median over columns of the across-row variance of deviations.
    let mut vars = Vec::with_capacity(cols);
    for j in 0..cols {
        let mean = (0..rows).map(|i| dev[i * cols + j]).sum::<f64>() / rows as f64;
        let ss = (0..rows).map(|i| (dev[i * cols + j] - mean).powi(2)).sum::<f64>();
        vars.push(ss / (rows - 1) as f64);
    }
    median_small(&mut vars).sqrt().max(f64::EPSILON)
}

fn spread_of_counts(dev: &[f64], rows: usize, cols: usize, thr: f64) -> f64 {
    let (mut lo, mut hi) = (usize::MAX, 0usize);
    for j in 0..cols {
        let (mut r, mut g) = (0usize, 0usize);
        for i in 0..rows {
            let d = dev[i * cols + j];
            r += (d < -thr) as usize;
            g += (d > thr) as usize;
        }
        let c = r.max(g);
        lo = lo.min(c);
        hi = hi.max(c);
    }
    (hi - lo) as f64
}

/// S_x = max_t2 cnt_x(t2) − min_t2 cnt_x(t2) with the flags that produce it.
pub fn redgreen_statistic(entries: &[f64], rows: usize, cols: usize, r: f64) -> (f64, RedGreenFlags) {
    assert_eq!(entries.len(), rows * cols, "matrix shape mismatch");
    let mut dev = vec![0.0; entries.len()];
    let sigma = deviations(entries, rows, cols, &mut dev, &mut Vec::new());
    let thr = r * sigma;
    let red: Vec<bool> = dev.iter().map(|&d| d < -thr).collect();
    let green: Vec<bool> = dev.iter().map(|&d| d > thr).collect();
    let cnt: Vec<usize> = (0..cols)
        .map(|j| {
            let rc = (0..rows).filter(|&i| red[i * cols + j]).count();
            let gc = (0..rows).filter(|&i| green[i * cols + j]).count();
            rc.max(gc)
        })
        .collect();
    let s = (*cnt.iter().max().unwrap_or(&0) - *cnt.iter().min().unwrap_or(&0)) as f64;
    let col_pattern = |j: usize| (0..rows).map(|i| (red[i * cols + j], green[i * cols + j])).collect::<Vec<_>>();
    let first = col_pattern(0);
    let identical_columns = first.iter().any(|&(r, g)| r || g) && (1..cols).all(|j| col_pattern(j) == first);
    (s, RedGreenFlags { sigma, red, green, cnt, identical_columns })
}

/// Statistic-only closure for permutation replicas.
pub fn redgreen_statistic_fn(rows: usize, cols: usize, r: f64) -> impl Fn(&[f64]) -> f64 + Sync {
    move |v: &[f64]| {
        let mut dev = vec![0.0; v.len()];
        let sigma = deviations(v, rows, cols, &mut dev, &mut Vec::with_capacity(cols));
        spread_of_counts(&dev, rows, cols, r * sigma)
    }
}

/// Permutation p-value for a collected matrix.
pub fn matrix_pvalue(lm: &LogitMatrix, cfg: &RedGreenTestConfig, seed: u64) -> Result<PValueReport, DetectError> {
    Ok(permutation_test(&lm.entries, redgreen_statistic_fn(lm.rows, lm.cols, cfg.r), cfg.n_perm, cfg.ci_level, seed)?)
}

/// Per-cell multinomial resample of the tallies.
pub(crate) fn resample_tallies(tallies: &[Vec<u64>], g: &mut SplitMix64) -> Vec<Vec<u64>> {
    tallies
        .iter()
        .map(|t| {
            let n: u64 = t.iter().sum();
            let mut out = vec![0u64; t.len()];
            for _ in 0..n {
                let mut u = g.next_below(n);
                for (k, &c) in t.iter().enumerate() {
                    if u < c {
                        out[k] += 1;
                        break;
                    }
                    u -= c;
                }
            }
            out
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RedGreenDiagnostics {
    flags: RedGreenFlags,
    degenerate_matrix: bool,
    permutation_ci: Option<(f64, f64)>,
    single_p_value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    bootstrap_p_values: Option<Vec<f64>>,
}

/// Collect, compute S_x, and test against matrix permutations.
pub fn redgreen_test(model: &mut BlackBoxHandle, cfg: &RedGreenTestConfig, seed: u64) -> Result<TestReport, DetectError> {
    let start = model.queries_used();
    let lm = collect_logit_matrix(model, cfg)?;
    let (s, flags) = redgreen_statistic(&lm.entries, lm.rows, lm.cols, cfg.r);
    let single = matrix_pvalue(&lm, cfg, mix(seed, 0x7065_726d))?;
    let mut p = single.p_value;
    let mut boot = None;
    if let Some(reps) = cfg.bootstrap_reps.filter(|&b| b > 0) {
        let mut ps = Vec::with_capacity(reps);
        for b in 0..reps as u64 {
            let mut g = SplitMix64::new(mix(seed, 0x626f_6f74 ^ b));
            let resampled = lm.with_tallies(resample_tallies(&lm.tallies, &mut g))?;
            ps.push(matrix_pvalue(&resampled, cfg, mix(seed, b))?.p_value);
        }
        p = median(&ps);
        boot = Some(ps);
    }
    let diagnostics = RedGreenDiagnostics {
        flags,
        degenerate_matrix: lm.is_degenerate(),
        permutation_ci: single.ci,
        single_p_value: single.p_value,
        bootstrap_p_values: boot,
    };
    Ok(TestReport {
        family: Family::RedGreen,
        p_value: p,
        statistic: s,
        query_cost: QueryCost {
            total: model.queries_used() - start,
            phase1: Some(lm.phase1_queries),
            phase2: Some(lm.phase2_queries),
        },
        model_id: model.model_id(),
        seed,
        config: to_value(cfg),
        evidence: Evidence::LogitMatrix(Box::new(lm)),
        diagnostics: Some(to_value(&diagnostics)),
        estimates: None,
    })
}
