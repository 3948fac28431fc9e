//! Campaign commands: detect, estimate, report and the diversity audit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use wmaudit::blackbox::http::HttpModel;
use wmaudit::blackbox::replay::ReplayModel;
use wmaudit::blackbox::{
    BlackBox, BlackBoxError, BlackBoxHandle, Response, SemanticQuery, Simulator, SimulatorConfig, Transcript,
};
use wmaudit::detectors::{
    cache_test, diversity_audit, fixedsampling_test, median, redgreen_test, DetectError, Evidence, TestReport,
};
use wmaudit::estimators::{classify_cache_variant, estimate_context_size, estimate_delta, estimate_key_length};
use wmaudit::rng::mix;
use wmaudit::schemes::Family;

use crate::config::{CampaignConfig, Source};

/// How a command ended when it did not fail outright.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Complete,
    BudgetExhausted,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TestSummary {
    /// Median p over the completed runs.
    pub median_p: Option<f64>,
    pub rejected: Option<bool>,
    pub p_values: Vec<f64>,
    /// Report files relative to the output directory, one per completed run.
    pub reports: Vec<String>,
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub model_id: String,
    pub seed: u64,
    pub repetitions: usize,
    pub level: f64,
    pub complete: bool,
    pub budget: Option<u64>,
    pub queries_used: u64,
    pub tests: BTreeMap<Family, TestSummary>,
}

impl TestSummary {
    fn finish(&mut self, level: f64) {
        self.median_p = (!self.p_values.is_empty()).then(|| median(&self.p_values));
        self.rejected = self.median_p.map(|p| p < level);
    }
}

/// Counts transport queries against a budget shared by every model of the
/// campaign.
struct Metered {
    inner: Box<dyn BlackBox>,
    used: Arc<AtomicU64>,
    budget: Option<u64>,
    /// Rare words saved by the recorded campaign, for replays.
    rare_words: Option<Vec<String>>,
}

impl BlackBox for Metered {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError> {
        let used = self.used.load(Ordering::Relaxed);
        if let Some(budget) = self.budget.filter(|&b| used >= b) {
            return Err(BlackBoxError::BudgetExhausted { used, budget });
        }
        self.used.fetch_add(1, Ordering::Relaxed);
        self.inner.ask(q)
    }

    fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
        self.inner.reset_cache()
    }

    fn rare_words(&self) -> Option<Vec<String>> {
        self.rare_words.clone().or_else(|| self.inner.rare_words())
    }
}

/// Opens models for runs, tracking the campaign-wide budget.
pub struct Models {
    source: Source,
    budget: Option<u64>,
    used: Arc<AtomicU64>,
    out: PathBuf,
}

impl Models {
    pub fn new(cfg: &CampaignConfig) -> Result<Self> {
        Ok(Self { source: cfg.source()?, budget: cfg.budget, used: Arc::default(), out: cfg.out.clone() })
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Relaxed)
    }

    /// A fresh handle for run `name`. Simulator sampling randomness is
    /// re-seeded per run; the model and watermark key stay fixed.
    pub fn open(&self, name: &str, seed: u64) -> Result<BlackBoxHandle> {
        self.open_with(name, seed, |c| c)
    }

    fn open_with(
        &self,
        name: &str,
        seed: u64,
        adjust: impl FnOnce(SimulatorConfig) -> SimulatorConfig,
    ) -> Result<BlackBoxHandle> {
        let model: Box<dyn BlackBox> = match &self.source {
            Source::Simulator(c) => {
                let mut c = adjust(c.clone());
                c.sample_seed = mix(c.sample_seed, seed);
                Box::new(Simulator::new(c)?)
            }
            Source::Provider(p) => Box::new(HttpModel::new(p.clone())?),
            Source::Replay(dir) => Box::new(ReplayModel::load(&transcript_path(dir, name))?),
        };
        let transcript = match &self.source {
            Source::Replay(_) => Transcript::disabled(),
            _ => {
                fs::create_dir_all(self.out.join("transcripts"))?;
                Transcript::file_only(&transcript_path(&self.out, name))?
            }
        };
        let rare_words = match &self.source {
            Source::Replay(dir) if dir.join(RARE_WORDS).is_file() => Some(read_json(&dir.join(RARE_WORDS))?),
            _ => None,
        };
        let metered = Metered { inner: model, used: Arc::clone(&self.used), budget: self.budget, rare_words };
        Ok(BlackBoxHandle::new(Box::new(metered)).with_transcript(transcript))
    }

    pub fn close(&self, mut h: BlackBoxHandle) -> Result<()> {
        h.transcript_mut().flush()?;
        Ok(())
    }

    fn simulator_temperature_ok(&self, temps: &[f64]) -> Result<()> {
        if !matches!(self.source, Source::Simulator(_)) && temps.len() != 1 {
            bail!("remote models take their temperature from the provider file; list exactly one temperature");
        }
        Ok(())
    }
}

/// The adapter's rare-word list, written next to the transcripts so that
/// replays build the same uncommon prefixes.
const RARE_WORDS: &str = "rare_words.json";

fn transcript_path(dir: &Path, name: &str) -> PathBuf {
    dir.join("transcripts").join(format!("{name}.jsonl"))
}

fn run_name(rep: usize, family: Family) -> String {
    format!("rep{rep:03}_{}", family.name())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn run_test(cfg: &CampaignConfig, family: Family, h: &mut BlackBoxHandle, seed: u64) -> Result<TestReport, DetectError> {
    match family {
        Family::RedGreen => redgreen_test(h, &cfg.red_green, seed),
        Family::FixedSampling => fixedsampling_test(h, &cfg.fixed_sampling, seed),
        Family::CacheAugmented => cache_test(h, &cfg.cache, seed),
    }
}

/// Runs the configured tests `repetitions` times and writes one report per
/// run plus summary.json. A budget stop writes what was completed.
pub fn detect(cfg: &CampaignConfig) -> Result<Outcome> {
    let models = Models::new(cfg)?;
    let mut tests: BTreeMap<Family, TestSummary> = cfg.tests.iter().map(|&f| (f, TestSummary::default())).collect();
    let mut model_id = String::new();
    let mut outcome = Outcome::Complete;
    'runs: for rep in 0..cfg.repetitions {
        for (i, &family) in cfg.tests.iter().enumerate() {
            let name = run_name(rep, family);
            let seed = mix(cfg.seed, (rep * cfg.tests.len() + i) as u64);
            let mut h = models.open(&name, seed)?;
            if model_id.is_empty() {
                model_id = h.model_id();
                if let Some(words) = h.rare_words() {
                    write_json(&cfg.out.join(RARE_WORDS), &words)?;
                }
            }
            let res = run_test(cfg, family, &mut h, seed);
            models.close(h)?;
            let entry = tests.get_mut(&family).expect("family listed");
            match res {
                Ok(report) => {
                    let file = format!("reports/{name}.json");
                    write_json(&cfg.out.join(&file), &report)?;
                    eprintln!("{name}: p = {:.4e}", report.p_value);
                    entry.p_values.push(report.p_value);
                    entry.reports.push(file);
                }
                Err(e) if e.is_budget_exhausted() => {
                    eprintln!("{name}: {e}");
                    entry.errors.push(format!("{name}: {e}"));
                    outcome = Outcome::BudgetExhausted;
                    break 'runs;
                }
                Err(e) => {
                    eprintln!("{name}: {e}");
                    entry.errors.push(format!("{name}: {e}"));
                }
            }
        }
    }
    tests.values_mut().for_each(|t| t.finish(cfg.level));
    let summary = Summary {
        model_id,
        seed: cfg.seed,
        repetitions: cfg.repetitions,
        level: cfg.level,
        complete: outcome == Outcome::Complete,
        budget: cfg.budget,
        queries_used: models.used(),
        tests,
    };
    write_json(&cfg.out.join("summary.json"), &summary)?;
    print_summary(&summary);
    Ok(outcome)
}

fn print_summary(s: &Summary) {
    println!("model {}  ({} queries{})", s.model_id, s.queries_used, if s.complete { "" } else { ", incomplete" });
    for (f, t) in &s.tests {
        let verdict = match t.rejected {
            Some(true) => "watermark detected",
            Some(false) => "no evidence",
            None => "no completed runs",
        };
        let p = t.median_p.map_or("-".to_string(), |p| format!("{p:.4e}"));
        println!("  {:<16} median p {p:>11}  over {} runs  {verdict}", f.name(), t.p_values.len());
    }
}

/// Dispatches estimators for every family the earlier detect run rejected.
pub fn estimate(cfg: &CampaignConfig, reports_dir: &Path, only: Option<Family>) -> Result<Outcome> {
    let summary: Summary = read_json(&reports_dir.join("summary.json"))?;
    let rejected: Vec<Family> = summary.tests.iter().filter(|(_, t)| t.rejected == Some(true)).map(|(&f, _)| f).collect();
    let targets = match only {
        Some(f) if rejected.contains(&f) => vec![f],
        Some(f) => {
            let p = summary.tests.get(&f).and_then(|t| t.median_p);
            bail!(
                "{} was not rejected (median p {}) at level {}; its parameters are not estimated",
                f.name(),
                p.map_or("unavailable".into(), |p| format!("{p:.4}")),
                summary.level
            );
        }
        None if rejected.is_empty() => {
            bail!("no watermark family was rejected at level {}; nothing to estimate", summary.level)
        }
        None => rejected,
    };
    let models = Models::new(cfg)?;
    let mut outcome = Outcome::Complete;
    for family in targets {
        let t = &summary.tests[&family];
        // The run with the smallest p carries the strongest evidence.
        let best = t
            .p_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .ok_or_else(|| anyhow!("no report for {}", family.name()))?;
        let mut report: TestReport = read_json(&reports_dir.join(&t.reports[best]))?;
        let seed = mix(cfg.seed, 0xe57 + best as u64);
        let (estimates, stop) = estimate_family(cfg, &models, &report, seed)?;
        report.estimates = Some(estimates);
        let path = cfg.out.join("estimates").join(format!("{}.json", family.name()));
        write_json(&path, &report)?;
        println!("{}: {}", family.name(), describe(report.estimates.as_ref().expect("just set")));
        if stop {
            outcome = Outcome::BudgetExhausted;
            break;
        }
    }
    Ok(outcome)
}

/// Estimates as JSON plus whether the budget ran out.
fn estimate_family(
    cfg: &CampaignConfig,
    models: &Models,
    report: &TestReport,
    seed: u64,
) -> Result<(serde_json::Value, bool)> {
    let mut out = serde_json::Map::new();
    let mut stop = false;
    let mut record = |key: &str, r: Result<serde_json::Value, wmaudit::estimators::EstimateError>| {
        match r {
            Ok(v) => {
                out.insert(key.into(), v);
            }
            Err(e) => {
                stop |= e.is_budget_exhausted();
                out.insert(key.into(), json!({ "error": e.to_string() }));
            }
        }
    };
    match &report.evidence {
        Evidence::LogitMatrix(lm) => {
            record("delta", estimate_delta(lm, &cfg.estimate.delta, seed).map(|e| to_json(&e)));
            if cfg.estimate.context_size {
                let mut h = models.open("estimate_context_size", seed)?;
                let r = estimate_context_size(&mut h, &cfg.estimate.context, &lm.choices, lm.target);
                models.close(h)?;
                record("context_size", r.map(|e| to_json(&e)));
            }
        }
        Evidence::Rarefaction(d) => {
            record("key_length", estimate_key_length(d, &cfg.estimate.key_length, seed).map(|e| to_json(&e)));
        }
        Evidence::Cache(d) => {
            let mut h = models.open("estimate_cache_variant", seed)?;
            let r = classify_cache_variant(&mut h, &cfg.cache, cfg.estimate.k_repeats, seed, Some(d));
            models.close(h)?;
            record("cache_variant", r.map(|e| to_json(&e)));
        }
    }
    Ok((serde_json::Value::Object(out), stop))
}

fn to_json<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).unwrap_or(serde_json::Value::Null)
}

fn describe(est: &serde_json::Value) -> String {
    let mut parts = Vec::new();
    let f = |v: &serde_json::Value, k: &str| v.get(k).and_then(|x| x.as_f64());
    if let Some(obj) = est.as_object() {
        for (k, v) in obj {
            if let Some(e) = v.get("error").and_then(|e| e.as_str()) {
                parts.push(format!("{k}: failed ({e})"));
                continue;
            }
            let s = match k.as_str() {
                "delta" => {
                    let ci = v.get("ci").and_then(|c| c.as_array()).cloned().unwrap_or_default();
                    let lo = ci.first().and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
                    let hi = ci.get(1).and_then(|x| x.as_f64()).unwrap_or(f64::NAN);
                    format!("δ̂ = {:.3} [{lo:.3}, {hi:.3}]", f(v, "delta_hat").unwrap_or(f64::NAN))
                }
                "context_size" => match v.get("h_hat").and_then(|h| h.as_u64()) {
                    Some(h) => format!("context size {h}"),
                    None => "no context dependence found".into(),
                },
                "key_length" => format!("n̂_key = {:.1}", f(v, "n_key_hat").unwrap_or(f64::NAN)),
                "cache_variant" => {
                    let var = v.get("variant").and_then(|x| x.as_str()).unwrap_or("?");
                    match v.get("alpha").and_then(|a| a.get("value")).and_then(|a| a.as_f64()) {
                        Some(a) => format!("{var}, α {} {a:.3}", if v["alpha"]["kind"] == "lower_bound" { "≥" } else { "≈" }),
                        None => var.to_string(),
                    }
                }
                _ => v.to_string(),
            };
            parts.push(s);
        }
    }
    parts.join("; ")
}

/// Recomputes the medians from the individual report files and checks them
/// against summary.json.
pub fn report(dir: &Path) -> Result<()> {
    let summary: Summary = read_json(&dir.join("summary.json"))?;
    let mut mismatches = Vec::new();
    for (f, t) in &summary.tests {
        let ps: Vec<f64> = t
            .reports
            .iter()
            .map(|r| read_json::<TestReport>(&dir.join(r)).map(|rep| rep.p_value))
            .collect::<Result<_>>()?;
        let recomputed = (!ps.is_empty()).then(|| median(&ps));
        if recomputed != t.median_p {
            mismatches.push(format!("{}: summary {:?}, reports {:?}", f.name(), t.median_p, recomputed));
        }
    }
    print_summary(&summary);
    for (f, t) in &summary.tests {
        for e in &t.errors {
            println!("  {} error: {e}", f.name());
        }
    }
    let est_dir = dir.join("estimates");
    if est_dir.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(&est_dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        files.sort();
        for p in files.iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
            let rep: TestReport = read_json(p)?;
            if let Some(e) = &rep.estimates {
                println!("  {:<16} {}", rep.family.name(), describe(e));
            }
        }
    }
    if !mismatches.is_empty() {
        bail!("summary.json disagrees with the report files: {}", mismatches.join("; "));
    }
    Ok(())
}

/// Measures n − R(n) over the length grid at each temperature and writes
/// diversity.json.
pub fn audit_diversity(cfg: &CampaignConfig) -> Result<Outcome> {
    let d = &cfg.diversity;
    let models = Models::new(cfg)?;
    models.simulator_temperature_ok(&d.temperatures)?;
    let mut i = 0u64;
    let table = diversity_audit(
        |t| {
            i += 1;
            models
                .open_with(&format!("diversity_t{i}"), mix(cfg.seed, i), |mut c| {
                    c.model.temperature = t;
                    c
                })
                .map_err(|e| DetectError::Config(format!("{e:#}")))
        },
        &d.t_grid,
        d.n,
        &d.temperatures,
        d.prompt_id,
    );
    let table = match table {
        Ok(t) => t,
        Err(e) if e.is_budget_exhausted() => {
            eprintln!("{e}");
            return Ok(Outcome::BudgetExhausted);
        }
        Err(e) => return Err(e.into()),
    };
    write_json(&cfg.out.join("diversity.json"), &table)?;
    println!("{:>6} {:>10} {:>8}", "T", "α̂", "R²");
    for (t, fit) in &table.fits {
        let a = fit.alpha_hat.map_or("saturated".into(), |a| format!("{a:.4}"));
        let r2 = fit.r_squared.map_or("-".into(), |r| format!("{r:.3}"));
        println!("{t:>6} {a:>10} {r2:>8}");
    }
    Ok(Outcome::Complete)
}
