//! The three presence tests: Red-Green (logit matrix + permutation test),
//! Fixed-Sampling (rarefaction + Mann-Whitney U) and Cache-Augmented
//! (two-phase choice frequencies + Fisher's exact test).

pub mod cache;
pub mod fixed;
pub mod logit_matrix;
pub mod redgreen;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blackbox::{BlackBoxError, BlackBoxHandle, Response, SemanticQuery};
use crate::schemes::Family;
use crate::stats::StatsError;

pub use cache::{cache_test, CacheTestConfig, CacheTestData};
pub use fixed::{
    collect_rarefaction, diversity_audit, fit_diversity_slope, fixedsampling_test, power_precheck, DiversityRow,
    DiversityTable, RarefactionConfig, RarefactionData, SlopeFit,
};
pub use logit_matrix::{collect_logit_matrix, LogitMatrix};
pub use redgreen::{redgreen_statistic, redgreen_test, RedGreenFlags, RedGreenTestConfig};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    BlackBox(#[from] BlackBoxError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("no viable choice set among the candidates: {0}")]
    NoViableSigma(String),
    #[error("no candidate fruit pair within the uniformity band: {0}")]
    NoCandidatePair(String),
    #[error("retry budget exceeded for {what}: {valid} valid of {needed} needed after {attempts} queries")]
    RetryBudget { what: String, valid: usize, needed: usize, attempts: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl DetectError {
    /// True when the underlying cause is an exhausted query budget.
    pub fn is_budget_exhausted(&self) -> bool {
        matches!(self, DetectError::BlackBox(BlackBoxError::BudgetExhausted { .. }))
    }
}

/// Queries issued by a test, split by phase where the test has phases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryCost {
    pub total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase1: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase2: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    LogitMatrix(Box<LogitMatrix>),
    Rarefaction(Box<RarefactionData>),
    Cache(Box<CacheTestData>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub family: Family,
    pub p_value: f64,
    pub statistic: f64,
    pub query_cost: QueryCost,
    pub model_id: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub evidence: Evidence,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimates: Option<serde_json::Value>,
}

impl TestReport {
    pub fn rejected(&self, level: f64) -> bool {
        self.p_value < level
    }
}

/// Asks `q` until `needed` valid responses arrive, giving up after
/// `retry_factor × needed` queries.
pub(crate) fn ask_until_valid(
    model: &mut BlackBoxHandle,
    q: &SemanticQuery,
    needed: usize,
    retry_factor: usize,
    what: &str,
) -> Result<Vec<Response>, DetectError> {
    let cap = retry_factor.max(1) * needed.max(1);
    let mut out = Vec::with_capacity(needed);
    let mut attempts = 0;
    while out.len() < needed {
        if attempts >= cap {
            return Err(DetectError::RetryBudget { what: what.to_string(), valid: out.len(), needed, attempts });
        }
        attempts += 1;
        let r = model.ask(q)?;
        if r.valid {
            out.push(r);
        }
    }
    Ok(out)
}

pub(crate) fn to_value<T: Serialize>(x: &T) -> serde_json::Value {
    serde_json::to_value(x).unwrap_or(serde_json::Value::Null)
}

/// Sample median; NaN for an empty slice.
pub fn median(xs: &[f64]) -> f64 {
    crate::stats::percentile(xs, 0.5)
}
