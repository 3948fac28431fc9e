//! Statistical primitives used by the presence tests and estimators.

pub mod binom;
pub mod bootstrap;
pub mod fisher;
pub mod mood;
pub mod mwu;
pub mod nls;
pub mod permutation;
pub mod special;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use binom::binom_ci;
pub use bootstrap::{basic_ci, bootstrap, percentile, percentile_ci, BootstrapResult, CiMethod};
pub use fisher::{fisher_exact, ContingencyTable2x2};
pub use mood::moods_median_test;
pub use mwu::{mann_whitney_u, Alternative};
pub use nls::{gradient_descent, nls_fit, nls_fit_scalar, GdOptions, GdResult, NlsFit};
pub use permutation::{permutation_pvalue, permutation_test};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("did not converge after {iterations} iterations (best loss {best_loss})")]
    NonConvergence { iterations: usize, best_loss: f64, best_params: Vec<f64>, loss_trace: Vec<f64> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MonteCarloPermutation,
    MannWhitneyExact,
    MannWhitneyNormal,
    FisherExact,
    MoodMedian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueReport {
    pub p_value: f64,
    pub method: Method,
    pub ci: Option<(f64, f64)>,
    pub statistic: f64,
    pub n_samples: usize,
}
