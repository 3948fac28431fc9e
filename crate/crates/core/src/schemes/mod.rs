//! Watermark schemes as sampling transforms over the toy model.

pub mod cache;
pub mod fixed;
pub mod redgreen;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corelm::{softmax_values, LmError, LogitVector, Multinomial, Sampler, Step, TokenId, NEG_SENTINEL};

pub use cache::{CacheConfig, CacheSampler, CacheVariant, WatermarkKey};
pub use fixed::{FixedSampler, FixedSamplingConfig, FixedVariant, KeySequence};
pub use redgreen::{RedGreenConfig, RedGreenSampler, RedGreenVariant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("invalid scheme configuration: {0}")]
    Config(String),
    #[error("context too short: need {need} tokens, got {got}")]
    ContextTooShort { need: usize, got: usize },
    #[error("distribution has no positive mass")]
    NoMass,
}

impl From<SchemeError> for LmError {
    fn from(e: SchemeError) -> Self {
        LmError::Sampler(e.to_string())
    }
}

/// Any supported watermark, or none.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SchemeConfig {
    None,
    RedGreen(RedGreenConfig),
    FixedSampling(FixedSamplingConfig),
    Cache(CacheConfig),
}

impl SchemeConfig {
    pub fn family(&self) -> Option<Family> {
        match self {
            SchemeConfig::None => None,
            SchemeConfig::RedGreen(_) => Some(Family::RedGreen),
            SchemeConfig::FixedSampling(_) => Some(Family::FixedSampling),
            SchemeConfig::Cache(_) => Some(Family::CacheAugmented),
        }
    }

    pub fn sampler(&self, vocab: usize) -> Result<SchemeSampler, SchemeError> {
        Ok(match self {
            SchemeConfig::None => SchemeSampler::Plain(Multinomial),
            SchemeConfig::RedGreen(c) => SchemeSampler::RedGreen(RedGreenSampler::new(c.clone(), vocab)?),
            SchemeConfig::FixedSampling(c) => SchemeSampler::Fixed(FixedSampler::from_config(c, vocab)?),
            SchemeConfig::Cache(c) => SchemeSampler::Cache(CacheSampler::new(c.clone())?),
        })
    }
}

/// The three scheme families the detectors target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    RedGreen,
    FixedSampling,
    CacheAugmented,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::RedGreen => "red_green",
            Family::FixedSampling => "fixed_sampling",
            Family::CacheAugmented => "cache_augmented",
        }
    }
}

/// Enum dispatch over the concrete samplers.
#[derive(Clone, Debug)]
pub enum SchemeSampler {
    Plain(Multinomial),
    RedGreen(RedGreenSampler),
    Fixed(FixedSampler),
    Cache(CacheSampler),
}

impl SchemeSampler {
    /// Empties the context cache; no-op for schemes without one.
    pub fn reset_cache(&mut self) {
        if let SchemeSampler::Cache(c) = self {
            c.reset_cache();
        }
    }
}

impl SchemeSampler {
    /// Draw restricted to `tokens` (ascending ids) given their logits.
    /// Plain and Red-Green schemes touch only the listed coordinates; the
    /// other schemes build the masked dense vector.
    pub fn sample_sparse(
        &mut self,
        tokens: &[TokenId],
        logits: &[f64],
        step_context: &[TokenId],
        temperature: f64,
        vocab: usize,
        rng: &mut dyn RngCore,
    ) -> Result<TokenId, LmError> {
        if tokens.is_empty() || tokens.len() != logits.len() {
            return Err(LmError::EmptyAllowed);
        }
        match self {
            SchemeSampler::Plain(_) => Ok(tokens[softmax_values(logits, temperature)?.sample(rng) as usize]),
            SchemeSampler::RedGreen(s) => s.sample_sparse(tokens, logits, step_context, temperature, rng),
            _ => {
                let mut v = vec![NEG_SENTINEL; vocab];
                for (&t, &l) in tokens.iter().zip(logits) {
                    *v.get_mut(t as usize).ok_or(LmError::TokenOutOfRange { token: t, vocab })? = l;
                }
                let l = LogitVector::new(v)?;
                self.sample(&Step { logits: &l, context: step_context, position: 0, temperature }, rng)
            }
        }
    }
}

impl Sampler for SchemeSampler {
    fn begin_generation(&mut self, rng: &mut dyn RngCore) {
        match self {
            SchemeSampler::Plain(s) => s.begin_generation(rng),
            SchemeSampler::RedGreen(s) => s.begin_generation(rng),
            SchemeSampler::Fixed(s) => s.begin_generation(rng),
            SchemeSampler::Cache(s) => s.begin_generation(rng),
        }
    }

    fn sample(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<TokenId, LmError> {
        match self {
            SchemeSampler::Plain(s) => s.sample(step, rng),
            SchemeSampler::RedGreen(s) => s.sample(step, rng),
            SchemeSampler::Fixed(s) => s.sample(step, rng),
            SchemeSampler::Cache(s) => s.sample(step, rng),
        }
    }

    fn observe_forced(&mut self, context: &[TokenId], token: TokenId) {
        if let SchemeSampler::Cache(s) = self {
            s.observe_forced(context, token);
        }
    }
}
