//! Parameter estimation once a family has been detected: δ and context
//! size h for Red-Green, key length for Fixed-Sampling, variant and α for
//! Cache-Augmented schemes.

pub mod cachevariant;
pub mod context;
pub mod delta;
pub mod keylen;

use thiserror::Error;

use crate::blackbox::BlackBoxError;
use crate::detectors::DetectError;
use crate::stats::StatsError;

pub use cachevariant::{
    classify_cache_variant, classify_from_runs, AlphaInfo, CacheRunSummary, CacheVariantClass, CacheVariantEstimate,
};
pub use context::{estimate_context_size, ContextSizeConfig, ContextSizeEstimate};
pub use delta::{estimate_delta, fit_delta_model, DeltaConfig, DeltaEstimate, DeltaFit};
pub use keylen::{estimate_key_length, rarefaction_curve, KeyLengthConfig, KeyLengthEstimate};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    BlackBox(#[from] BlackBoxError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("fit stopped at the bound {bound} (estimate {estimate}); collect more responses")]
    FitAtBound { estimate: f64, bound: f64 },
    #[error("gradient descent did not converge after {iterations} iterations; loss trace {loss_trace:?}")]
    NonConvergence { iterations: usize, loss_trace: Vec<f64> },
    #[error("invalid input: {0}")]
    Input(String),
}

impl EstimateError {
    pub fn is_budget_exhausted(&self) -> bool {
        match self {
            EstimateError::Detect(d) => d.is_budget_exhausted(),
            EstimateError::BlackBox(b) => matches!(b, BlackBoxError::BudgetExhausted { .. }),
            _ => false,
        }
    }
}

pub(crate) fn from_gd(e: StatsError) -> EstimateError {
    match e {
        StatsError::NonConvergence { iterations, loss_trace, .. } => EstimateError::NonConvergence { iterations, loss_trace },
        other => EstimateError::Stats(other),
    }
}
