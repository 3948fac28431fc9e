//! δ estimation from per-word logit estimates on the Red-Green test data.
//!
//! Model per cell (t1, t2) and word w of Σ:
//! l̂(w) = w̄_{t1} + G_w δ̄ − log Σ_{w'≠w} exp(w̄'_{t1} + G_{w'} δ̄),
//! with w̄ of the first word pinned to 0, fitted by gradient descent on the
//! mean squared error.
//!
//! The green indicators G are chosen on one half of each cell's responses
//! (per-column pattern search over Σ) and δ̄ is fitted on the other half,
//! so that the selection step does not leak into the estimate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{from_gd, EstimateError};
use crate::detectors::logit_matrix::{clamped_logit, LogitMatrix};
use crate::detectors::redgreen::resample_tallies;
use crate::detectors::redgreen_statistic;
use crate::rng::{mix, SplitMix64};
use crate::stats::bootstrap::CiMethod;
use crate::stats::{gradient_descent, GdOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeltaConfig {
    pub bootstrap_reps: usize,
    pub level: f64,
    pub ci_method: CiMethod,
    /// Also resample digit columns in each replicate, so that column-level
    /// variation of the base logits enters the interval.
    pub resample_columns: bool,
    pub gd: GdOptions,
    /// Starting values of δ for the pattern search restarts.
    pub delta_grid: Vec<f64>,
    /// Select green patterns and fit δ̄ on disjoint halves of the responses.
    pub sample_split: bool,
    pub max_rounds: usize,
    /// Threshold of the initial per-word flags.
    pub r: f64,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            bootstrap_reps: 100,
            level: 0.95,
            ci_method: CiMethod::Basic,
            resample_columns: true,
            gd: GdOptions::default(),
            delta_grid: vec![0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0],
            sample_split: true,
            max_rounds: 50,
            r: 1.96,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaFit {
    pub delta_bar: f64,
    /// w̄ per row t1 and word; the pinned word is 0 in every row.
    pub w_bar: Vec<Vec<f64>>,
    pub pinned: usize,
    pub loss: f64,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaEstimate {
    /// δ/T.
    pub delta_hat: f64,
    pub ci: (f64, f64),
    pub level: f64,
    pub fit: DeltaFit,
    /// Green indicator per column t2 and word.
    pub green: Vec<Vec<bool>>,
    pub selection_delta: f64,
    pub selection_sse: f64,
    pub bootstrap_reps: usize,
    /// Replicates whose fit did not converge; they are left out of the CI.
    pub bootstrap_failures: usize,
    pub sample_split: bool,
}

const PINNED: usize = 0;

fn param_index(i: usize, w: usize, s: usize) -> usize {
    1 + i * (s - 1) + (w - 1)
}

/// Gradient-descent fit of the logit model. `logits` and `green` are
/// row-major per cell, one entry per word. Starts from `init` if given,
/// otherwise from the log-linear solution when the green pattern is shared
/// across rows, otherwise from zero.
pub fn fit_delta_model(
    logits: &[Vec<f64>],
    rows: usize,
    cols: usize,
    green: &[Vec<bool>],
    opts: GdOptions,
    init: Option<&DeltaFit>,
) -> Result<DeltaFit, EstimateError> {
    let s = logits.first().map_or(0, |v| v.len());
    if s < 2 || logits.len() != rows * cols || green.len() != logits.len() {
        return Err(EstimateError::Input("need at least two words and one entry per cell".into()));
    }
    if logits.iter().any(|v| v.len() != s || v.iter().any(|x| !x.is_finite())) || green.iter().any(|g| g.len() != s) {
        return Err(EstimateError::Input("ragged or non-finite logit estimates".into()));
    }
    let n_params = 1 + rows * (s - 1);
    let mut p0 = vec![0.0; n_params];
    let shared = (0..rows * cols).all(|c| green[c] == green[c % cols]);
    if let Some(f) = init {
        p0[0] = f.delta_bar;
        for i in 0..rows {
            for w in 1..s {
                p0[param_index(i, w, s)] = f.w_bar[i][w];
            }
        }
    } else if shared {
        // Start from the log-linear least-squares solution: log p(w) is
        // linear in (w̄, δ̄) up to a per-cell constant.
        let y: Vec<Vec<f64>> = logits
            .iter()
            .map(|l| {
                let lp: Vec<f64> = l.iter().map(|&x| -(-x).exp().ln_1p()).collect();
                let m = lp.iter().sum::<f64>() / s as f64;
                lp.iter().map(|v| v - m).collect()
            })
            .collect();
        let (d, b, _) = fit_given(&y, rows, cols, &green[..cols]);
        p0[0] = d;
        for i in 0..rows {
            for w in 1..s {
                p0[param_index(i, w, s)] = b[i][w] - b[i][PINNED];
            }
        }
    }
    let n = (rows * cols * s) as f64;
    let mut z = vec![0.0; s];
    let mut lse = vec![0.0; s];
    let mut e = vec![0.0; s];
    let mut dz = vec![0.0; s];
    let loss = |p: &[f64], g: &mut [f64]| -> f64 {
        g.iter_mut().for_each(|x| *x = 0.0);
        let mut total = 0.0;
        for i in 0..rows {
            for j in 0..cols {
                let c = i * cols + j;
                for w in 0..s {
                    let a = if w == PINNED { 0.0 } else { p[param_index(i, w, s)] };
                    z[w] = a + if green[c][w] { p[0] } else { 0.0 };
                }
                for w in 0..s {
                    let m = (0..s).filter(|&v| v != w).map(|v| z[v]).fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = (0..s).filter(|&v| v != w).map(|v| (z[v] - m).exp()).sum();
                    lse[w] = m + sum.ln();
                    e[w] = z[w] - lse[w] - logits[c][w];
                    total += e[w] * e[w];
                }
                for v in 0..s {
                    let mut d = e[v];
                    for w in 0..s {
                        if w != v {
                            d -= e[w] * (z[v] - lse[w]).exp();
                        }
                    }
                    dz[v] = 2.0 * d / n;
                }
                for v in 0..s {
                    if v != PINNED {
                        g[param_index(i, v, s)] += dz[v];
                    }
                    if green[c][v] {
                        g[0] += dz[v];
                    }
                }
            }
        }
        total / n
    };
    let r = gradient_descent(loss, p0, opts).map_err(from_gd)?;
    let w_bar = (0..rows)
        .map(|i| (0..s).map(|w| if w == PINNED { 0.0 } else { r.params[param_index(i, w, s)] }).collect())
        .collect();
    Ok(DeltaFit { delta_bar: r.params[0], w_bar, pinned: PINNED, loss: r.loss, iterations: r.iterations })
}

/// Splits each cell's responses uniformly into two halves.
fn split_tallies(tallies: &[Vec<u64>], seed: u64) -> (Vec<Vec<u64>>, Vec<Vec<u64>>) {
    let mut a = Vec::with_capacity(tallies.len());
    let mut b = Vec::with_capacity(tallies.len());
    for (c, t) in tallies.iter().enumerate() {
        let mut labels: Vec<usize> = t.iter().enumerate().flat_map(|(w, &k)| std::iter::repeat_n(w, k as usize)).collect();
        let half = labels.len() / 2;
        SplitMix64::new(mix(seed, c as u64)).partial_shuffle(&mut labels, half);
        let mut ta = vec![0u64; t.len()];
        for &w in &labels[..half] {
            ta[w] += 1;
        }
        let tb = t.iter().zip(&ta).map(|(&x, &y)| x - y).collect();
        a.push(ta);
        b.push(tb);
    }
    (a, b)
}

fn logits_of(tallies: &[Vec<u64>]) -> Vec<Vec<f64>> {
    tallies
        .iter()
        .map(|t| {
            let n: u64 = t.iter().sum();
            t.iter().map(|&k| clamped_logit(k, n)).collect()
        })
        .collect()
}

/// Clamped log-probabilities centred across words within each cell.
fn centred_logprobs(tallies: &[Vec<u64>]) -> Vec<Vec<f64>> {
    tallies
        .iter()
        .map(|t| {
            let n = t.iter().sum::<u64>().max(1) as f64;
            let lp: Vec<f64> = t.iter().map(|&k| (k as f64 / n).clamp(0.5 / n, 1.0 - 0.5 / n).ln()).collect();
            let m = lp.iter().sum::<f64>() / lp.len() as f64;
            lp.iter().map(|x| x - m).collect()
        })
        .collect()
}

struct Selection {
    patterns: Vec<Vec<bool>>,
    delta: f64,
    sse: f64,
}

/// Closed-form fixed-effects fit of y = b_{t1,w} + δ·(g_w − ḡ) for given
/// column patterns.
fn fit_given(y: &[Vec<f64>], rows: usize, cols: usize, pats: &[Vec<bool>]) -> (f64, Vec<Vec<f64>>, f64) {
    let s = pats[0].len();
    let x: Vec<Vec<f64>> = pats
        .iter()
        .map(|p| {
            let m = p.iter().filter(|&&g| g).count() as f64 / s as f64;
            p.iter().map(|&g| if g { 1.0 - m } else { -m }).collect()
        })
        .collect();
    let xbar: Vec<f64> = (0..s).map(|w| (0..cols).map(|j| x[j][w]).sum::<f64>() / cols as f64).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..rows {
        for w in 0..s {
            let ybar = (0..cols).map(|j| y[i * cols + j][w]).sum::<f64>() / cols as f64;
            for j in 0..cols {
                let xt = x[j][w] - xbar[w];
                num += (y[i * cols + j][w] - ybar) * xt;
                den += xt * xt;
            }
        }
    }
    let delta = if den > 0.0 { num / den } else { 0.0 };
    let b: Vec<Vec<f64>> = (0..rows)
        .map(|i| (0..s).map(|w| (0..cols).map(|j| y[i * cols + j][w] - delta * x[j][w]).sum::<f64>() / cols as f64).collect())
        .collect();
    let mut sse = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            for w in 0..s {
                sse += (y[i * cols + j][w] - b[i][w] - delta * x[j][w]).powi(2);
            }
        }
    }
    (delta, b, sse)
}

/// Best pattern per column for fixed b and δ.
fn update_patterns(y: &[Vec<f64>], rows: usize, cols: usize, b: &[Vec<f64>], delta: f64, s: usize) -> Vec<Vec<bool>> {
    let mut out = Vec::with_capacity(cols);
    for j in 0..cols {
        let rsum: Vec<f64> = (0..s).map(|w| (0..rows).map(|i| y[i * cols + j][w] - b[i][w]).sum()).collect();
        let mut best = (f64::INFINITY, 0u32);
        // The all-green pattern equals the all-red one and is skipped.
        for mask in 0..(1u32 << s) - 1 {
            let k = mask.count_ones() as f64;
            let m = k / s as f64;
            let (mut lin, mut sq) = (0.0, 0.0);
            for (w, r) in rsum.iter().enumerate() {
                let xw = if mask >> w & 1 == 1 { 1.0 - m } else { -m };
                lin += xw * r;
                sq += xw * xw;
            }
            let cost = -2.0 * delta * lin + rows as f64 * delta * delta * sq;
            if cost < best.0 - 1e-12 {
                best = (cost, mask);
            }
        }
        out.push((0..s).map(|w| best.1 >> w & 1 == 1).collect());
    }
    out
}

fn canonical(pats: &mut [Vec<bool>]) {
    for p in pats.iter_mut() {
        if p.iter().all(|&g| g) {
            p.iter_mut().for_each(|g| *g = false);
        }
    }
}

fn alternate(y: &[Vec<f64>], rows: usize, cols: usize, mut pats: Vec<Vec<bool>>, max_rounds: usize) -> Selection {
    let s = pats[0].len();
    canonical(&mut pats);
    let (mut delta, mut b, mut sse) = fit_given(y, rows, cols, &pats);
    for _ in 0..max_rounds {
        let next = update_patterns(y, rows, cols, &b, delta, s);
        if next == pats {
            break;
        }
        let (d2, b2, s2) = fit_given(y, rows, cols, &next);
        if s2 > sse - 1e-12 {
            break;
        }
        (pats, delta, b, sse) = (next, d2, b2, s2);
    }
    // δ < 0 with patterns P is δ > 0 with the complements.
    if delta < 0.0 {
        pats.iter_mut().for_each(|p| p.iter_mut().for_each(|g| *g = !*g));
        canonical(&mut pats);
        delta = -delta;
    }
    Selection { patterns: pats, delta, sse }
}

fn select_patterns(tallies: &[Vec<u64>], rows: usize, cols: usize, cfg: &DeltaConfig) -> Selection {
    let s = tallies[0].len();
    let y = centred_logprobs(tallies);
    // Initial flags: per word, majority over rows of the G flags.
    let mut init = vec![vec![false; s]; cols];
    for w in 0..s {
        let entries: Vec<f64> = logits_of(tallies).iter().map(|l| l[w]).collect();
        let (_, flags) = redgreen_statistic(&entries, rows, cols, cfg.r);
        for (j, col) in init.iter_mut().enumerate() {
            let votes = (0..rows).filter(|&i| flags.green[i * cols + j]).count();
            col[w] = 2 * votes > rows;
        }
    }
    let mut best = alternate(&y, rows, cols, init, cfg.max_rounds);
    let b0: Vec<Vec<f64>> =
        (0..rows).map(|i| (0..s).map(|w| (0..cols).map(|j| y[i * cols + j][w]).sum::<f64>() / cols as f64).collect()).collect();
    for &d0 in &cfg.delta_grid {
        let pats = update_patterns(&y, rows, cols, &b0, d0, s);
        let cand = alternate(&y, rows, cols, pats, cfg.max_rounds);
        if cand.sse < best.sse - 1e-12 {
            best = cand;
        }
    }
    best
}

/// Estimates δ/T with a bootstrap interval over the responses of the
/// fitting half.
pub fn estimate_delta(lm: &LogitMatrix, cfg: &DeltaConfig, seed: u64) -> Result<DeltaEstimate, EstimateError> {
    let s = lm.choices.len();
    if s < 2 {
        return Err(EstimateError::Input("δ estimation needs a choice set of at least two words".into()));
    }
    if s > 12 {
        return Err(EstimateError::Input("pattern search supports at most 12 words".into()));
    }
    if cfg.bootstrap_reps == 0 || !(cfg.level > 0.0 && cfg.level < 1.0) {
        return Err(EstimateError::Input("bootstrap_reps must be positive and level in (0, 1)".into()));
    }
    let (rows, cols) = (lm.rows, lm.cols);
    let (sel_t, fit_t) = if cfg.sample_split {
        split_tallies(&lm.tallies, mix(seed, 0x73706c74))
    } else {
        (lm.tallies.clone(), lm.tallies.clone())
    };
    if fit_t.iter().any(|t| t.iter().sum::<u64>() == 0) || sel_t.iter().any(|t| t.iter().sum::<u64>() == 0) {
        return Err(EstimateError::Input("every cell needs responses in both halves".into()));
    }
    let sel = select_patterns(&sel_t, rows, cols, cfg);
    let green: Vec<Vec<bool>> = (0..rows * cols).map(|c| sel.patterns[c % cols].clone()).collect();
    let fit = fit_delta_model(&logits_of(&fit_t), rows, cols, &green, cfg.gd, None)?;
    let boot: Vec<Option<f64>> = (0..cfg.bootstrap_reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut g = SplitMix64::new(mix(seed, 0x626f_6f74_0000 + r));
            let picked: Vec<usize> =
                if cfg.resample_columns { (0..cols).map(|_| g.next_below(cols as u64) as usize).collect() } else { (0..cols).collect() };
            let cells: Vec<usize> = (0..rows).flat_map(|i| picked.iter().map(move |&j| i * cols + j)).collect();
            let base: Vec<Vec<u64>> = cells.iter().map(|&c| fit_t[c].clone()).collect();
            let gr: Vec<Vec<bool>> = cells.iter().map(|&c| green[c].clone()).collect();
            let t = resample_tallies(&base, &mut g);
            fit_delta_model(&logits_of(&t), rows, cols, &gr, cfg.gd, Some(&fit)).ok().map(|f| f.delta_bar)
        })
        .collect();
    let ok: Vec<f64> = boot.iter().flatten().copied().collect();
    if ok.is_empty() {
        return Err(EstimateError::Input("no bootstrap replicate converged".into()));
    }
    Ok(DeltaEstimate {
        delta_hat: fit.delta_bar,
        ci: cfg.ci_method.interval(fit.delta_bar, &ok, cfg.level),
        level: cfg.level,
        fit,
        green: sel.patterns,
        selection_delta: sel.delta,
        selection_sse: sel.sse,
        bootstrap_reps: cfg.bootstrap_reps,
        bootstrap_failures: boot.len() - ok.len(),
        sample_split: cfg.sample_split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exact model logits for given w̄, δ̄ and green indicators.
    fn model_logits(wbar: &[Vec<f64>], delta: f64, green: &[Vec<bool>], rows: usize, cols: usize) -> Vec<Vec<f64>> {
        let s = wbar[0].len();
        let mut out = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                let z: Vec<f64> = (0..s).map(|w| wbar[i][w] + if green[i * cols + j][w] { delta } else { 0.0 }).collect();
                out.push(
                    (0..s)
                        .map(|w| z[w] - (0..s).filter(|&v| v != w).map(|v| z[v].exp()).sum::<f64>().ln())
                        .collect(),
                );
            }
        }
        out
    }

    fn planted(rows: usize, cols: usize, s: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<bool>>) {
        let mut g = SplitMix64::new(seed);
        let wbar = (0..rows).map(|_| (0..s).map(|w| if w == 0 { 0.0 } else { g.next_f64() * 2.0 - 1.0 }).collect()).collect();
        let cols_pat: Vec<Vec<bool>> = (0..cols).map(|_| (0..s).map(|_| g.next_f64() < 0.3).collect()).collect();
        let green = (0..rows * cols).map(|c| cols_pat[c % cols].clone()).collect();
        (wbar, green)
    }

    #[test]
    fn zero_noise_inversion() {
        let (rows, cols, s) = (10, 9, 4);
        for (k, &d) in [0.5, 1.0, 2.0, 4.0].iter().enumerate() {
            let (wbar, green) = planted(rows, cols, s, 7 + k as u64);
            let l = model_logits(&wbar, d, &green, rows, cols);
            let fit = fit_delta_model(&l, rows, cols, &green, GdOptions::default(), None).unwrap();
            assert!((fit.delta_bar - d).abs() < 1e-2, "δ̄={d}: got {}", fit.delta_bar);
            assert!(fit.w_bar.iter().all(|r| r[0] == 0.0));
        }
    }

    /// Tallies proportional to exact model probabilities.
    fn exact_tallies(wbar: &[Vec<f64>], delta: f64, green: &[Vec<bool>], rows: usize, cols: usize, n: f64) -> Vec<Vec<u64>> {
        let s = wbar[0].len();
        (0..rows * cols)
            .map(|c| {
                let z: Vec<f64> = (0..s).map(|w| wbar[c / cols][w] + if green[c][w] { delta } else { 0.0 }).collect();
                let tot: f64 = z.iter().map(|v| v.exp()).sum();
                z.iter().map(|v| (n * v.exp() / tot).round() as u64).collect()
            })
            .collect()
    }

    #[test]
    fn pattern_search_recovers_planted_delta() {
        let (rows, cols, s) = (10, 9, 4);
        let (wbar, green) = planted(rows, cols, s, 3);
        let tallies = exact_tallies(&wbar, 2.0, &green, rows, cols, 1e6);
        let lm = LogitMatrix::from_tallies(rows, cols, tallies, 0, (0..s).map(|w| format!("w{w}")).collect()).unwrap();
        let cfg = DeltaConfig { bootstrap_reps: 10, sample_split: false, ..Default::default() };
        let est = estimate_delta(&lm, &cfg, 1).unwrap();
        assert!((est.delta_hat - 2.0).abs() < 0.02, "{}", est.delta_hat);
        for j in 0..cols {
            let truth = &green[j];
            let informative = truth.iter().any(|&g| g) && !truth.iter().all(|&g| g);
            if informative {
                assert_eq!(&est.green[j], truth, "column {j}");
            }
        }
    }

    #[test]
    fn split_preserves_totals() {
        let t = vec![vec![5, 7, 0, 9], vec![1, 1, 1, 1]];
        let (a, b) = split_tallies(&t, 4);
        for c in 0..2 {
            let sa: u64 = a[c].iter().sum();
            let sb: u64 = b[c].iter().sum();
            assert_eq!(sa + sb, t[c].iter().sum::<u64>());
            assert_eq!(sa, t[c].iter().sum::<u64>() / 2);
            assert!(a[c].iter().zip(&t[c]).all(|(x, y)| x <= y));
        }
    }
}
