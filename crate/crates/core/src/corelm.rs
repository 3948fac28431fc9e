//! Deterministic toy autoregressive language model.
//!
//! Each logit is a persistent per-token bias plus a hash-derived
//! perturbation of the last `c` context tokens. The model has no learned
//! weights; it only needs to produce stable, context-dependent
//! distributions that the watermark samplers can wrap.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix, normal_from_bits, splitmix64};

pub type TokenId = u32;
pub type TokenSeq = Vec<TokenId>;

/// Stand-in for negative infinity: probability exactly zero after softmax.
pub const NEG_SENTINEL: f64 = f64::MIN;

/// Standard deviation of the unscaled context perturbation.
pub const NOISE_SD: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmError {
    #[error("non-finite logit at index {0}")]
    NonFinite(usize),
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("probabilities invalid: {0}")]
    BadDistribution(String),
    #[error("allowed token set is empty")]
    EmptyAllowed,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("invalid model spec: {0}")]
    BadSpec(String),
    #[error("max_tokens must be at least 1")]
    ZeroLength,
    #[error("sampler failed: {0}")]
    Sampler(String),
}

/// Logits over the full vocabulary. Entries are finite; masked entries hold
/// [`NEG_SENTINEL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, LmError> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(LmError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for LogitVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// A probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution(Vec<f64>);

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, LmError> {
        if probs.is_empty() {
            return Err(LmError::BadDistribution("empty".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(LmError::BadDistribution("negative or non-finite entry".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(LmError::BadDistribution(format!("sums to {s}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(mut w: Vec<f64>) -> Result<Self, LmError> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(LmError::BadDistribution("weights do not sum to a positive value".into()));
        }
        for x in w.iter_mut() {
            *x /= s;
        }
        Self::new(w)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse-CDF draw in index order for a given u in [0, 1].
    pub fn quantile(&self, u: f64) -> TokenId {
        let mut cum = 0.0;
        let mut last = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > 0.0 {
                cum += p;
                last = i;
                if cum >= u {
                    return i as TokenId;
                }
            }
        }
        last as TokenId
    }

    /// Plain multinomial sample.
    pub fn sample<R: RngCore + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.random();
        self.quantile(u)
    }
}

/// Configuration of the toy model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyModelSpec {
    pub vocab_size: usize,
    pub base_context: usize,
    pub logit_scale: f64,
    pub seed: u64,
    pub temperature: f64,
}

impl Default for ToyModelSpec {
    fn default() -> Self {
        Self { vocab_size: 1024, base_context: 2, logit_scale: 3.0, seed: 0, temperature: 1.0 }
    }
}

impl ToyModelSpec {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.vocab_size < 8 {
            return Err(LmError::BadSpec(format!("vocab_size {} < 8", self.vocab_size)));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(LmError::BadSpec("vocab_size too large".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(LmError::BadTemperature(self.temperature));
        }
        if !(self.logit_scale > 0.0) || !self.logit_scale.is_finite() {
            return Err(LmError::BadSpec(format!("logit_scale {} must be positive", self.logit_scale)));
        }
        Ok(())
    }
}

const BIAS_TAG: u64 = 0x6269_6173; // "bias"
const CTX_TAG: u64 = 0x6374_7874; // "ctxt"

/// A toy model with its base biases materialized once.
#[derive(Clone, Debug)]
pub struct ToyModel {
    spec: ToyModelSpec,
    base: Vec<f64>,
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Result<Self, LmError> {
        spec.validate()?;
        let bias_seed = mix(spec.seed, BIAS_TAG);
        let base = (0..spec.vocab_size as u64).map(|i| normal_from_bits(mix(bias_seed, i))).collect();
        Ok(Self { spec, base })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    pub fn temperature(&self) -> f64 {
        self.spec.temperature
    }

    /// Per-token persistent bias (the "true" logit component).
    pub fn base_bias(&self) -> &[f64] {
        &self.base
    }

    fn context_hash(&self, context: &[TokenId]) -> u64 {
        let c = self.spec.base_context;
        let window = &context[context.len().saturating_sub(c)..];
        let mut h = mix(self.spec.seed, CTX_TAG ^ window.len() as u64);
        for &t in window {
            h = mix(h, t as u64);
        }
        h
    }

    #[inline]
    fn logit_with_hash(&self, h: u64, token: TokenId) -> f64 {
        let eps = NOISE_SD * normal_from_bits(splitmix64(h ^ (token as u64).wrapping_mul(0xD6E8_FEB8_6659_FD93)));
        self.base[token as usize] + self.spec.logit_scale * eps
    }

    /// Full logit vector for the next token.
    pub fn next_logits(&self, context: &[TokenId]) -> LogitVector {
        let h = self.context_hash(context);
        LogitVector((0..self.spec.vocab_size as TokenId).map(|t| self.logit_with_hash(h, t)).collect())
    }

    /// Logits of the listed tokens, in the order given.
    pub fn logits_for(&self, context: &[TokenId], tokens: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let h = self.context_hash(context);
        tokens
            .iter()
            .map(|&t| {
                if t as usize >= self.spec.vocab_size {
                    return Err(LmError::TokenOutOfRange { token: t, vocab: self.spec.vocab_size });
                }
                Ok(self.logit_with_hash(h, t))
            })
            .collect()
    }

    /// Logits for the listed tokens only, with every other entry masked.
    /// Equal to `constrain(next_logits(context), tokens)`.
    pub fn constrained_logits(&self, context: &[TokenId], tokens: &[TokenId]) -> Result<LogitVector, LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptyAllowed);
        }
        let h = self.context_hash(context);
        let mut v = vec![NEG_SENTINEL; self.spec.vocab_size];
        for &t in tokens {
            if t as usize >= self.spec.vocab_size {
                return Err(LmError::TokenOutOfRange { token: t, vocab: self.spec.vocab_size });
            }
            v[t as usize] = self.logit_with_hash(h, t);
        }
        Ok(LogitVector(v))
    }
}

/// Stateless convenience wrapper; prefer [`ToyModel`] in loops.
pub fn next_logits(spec: &ToyModelSpec, context: &[TokenId]) -> Result<LogitVector, LmError> {
    Ok(ToyModel::new(spec.clone())?.next_logits(context))
}

/// Temperature softmax. Sentinel entries get probability exactly 0.
pub fn softmax(l: &LogitVector, temperature: f64) -> Result<Distribution, LmError> {
    softmax_values(l.values(), temperature)
}

pub(crate) fn softmax_values(l: &[f64], temperature: f64) -> Result<Distribution, LmError> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(LmError::BadTemperature(temperature));
    }
    if let Some(i) = l.iter().position(|v| !v.is_finite()) {
        return Err(LmError::NonFinite(i));
    }
    let max = l.iter().copied().filter(|&x| x != NEG_SENTINEL).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(LmError::BadDistribution("all logits masked".into()));
    }
    let mut w: Vec<f64> =
        l.iter().map(|&x| if x == NEG_SENTINEL { 0.0 } else { ((x - max) / temperature).exp() }).collect();
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
    Ok(Distribution(w))
}

/// Masks every logit outside `allowed`.
pub fn constrain(l: &LogitVector, allowed: &[TokenId]) -> Result<LogitVector, LmError> {
    if allowed.is_empty() {
        return Err(LmError::EmptyAllowed);
    }
    let mut v = vec![NEG_SENTINEL; l.len()];
    for &t in allowed {
        let i = t as usize;
        if i >= l.len() {
            return Err(LmError::TokenOutOfRange { token: t, vocab: l.len() });
        }
        v[i] = l.0[i];
    }
    Ok(LogitVector(v))
}

/// What a sampler sees at one decoding step.
pub struct Step<'a> {
    pub logits: &'a LogitVector,
    /// Everything before the token being sampled (prompt included).
    pub context: &'a [TokenId],
    /// Index of this token within the current generation.
    pub position: usize,
    pub temperature: f64,
}

/// A decoding rule. Watermark schemes implement this.
pub trait Sampler {
    /// Called once before each generation.
    fn begin_generation(&mut self, _rng: &mut dyn RngCore) {}

    fn sample(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<TokenId, LmError>;

    /// Called for tokens that are placed into the output without sampling
    /// (forced echo). `context` ends right before the forced token.
    fn observe_forced(&mut self, _context: &[TokenId], _token: TokenId) {}
}

/// Unwatermarked multinomial sampling.
#[derive(Clone, Debug, Default)]
pub struct Multinomial;

impl Sampler for Multinomial {
    fn sample(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<TokenId, LmError> {
        Ok(softmax(step.logits, step.temperature)?.sample(rng))
    }
}

/// Free generation of exactly `max_tokens` tokens after `prompt`.
pub fn generate<S: Sampler + ?Sized>(
    model: &ToyModel,
    prompt: &[TokenId],
    max_tokens: usize,
    sampler: &mut S,
    rng_seed: u64,
) -> Result<TokenSeq, LmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    generate_with_rng(model, prompt, max_tokens, sampler, &mut rng)
}

/// As [`generate`] with a caller-owned RNG.
pub fn generate_with_rng<S: Sampler + ?Sized>(
    model: &ToyModel,
    prompt: &[TokenId],
    max_tokens: usize,
    sampler: &mut S,
    rng: &mut dyn RngCore,
) -> Result<TokenSeq, LmError> {
    if max_tokens == 0 {
        return Err(LmError::ZeroLength);
    }
    sampler.begin_generation(rng);
    let mut ctx: TokenSeq = prompt.to_vec();
    ctx.reserve(max_tokens);
    for position in 0..max_tokens {
        let logits = model.next_logits(&ctx);
        let tok = sampler.sample(&Step { logits: &logits, context: &ctx, position, temperature: model.temperature() }, rng)?;
        ctx.push(tok);
    }
    Ok(ctx.split_off(prompt.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> ToyModel {
        ToyModel::new(ToyModelSpec { seed: 11, ..Default::default() }).unwrap()
    }

    #[test]
    fn logits_are_deterministic() {
        let m = model();
        assert_eq!(m.next_logits(&[1, 2, 3]), m.next_logits(&[1, 2, 3]));
        let spec = ToyModelSpec { seed: 11, ..Default::default() };
        assert_eq!(next_logits(&spec, &[5, 6]).unwrap(), m.next_logits(&[5, 6]));
    }

    #[test]
    fn only_last_c_tokens_matter() {
        let m = model();
        assert_eq!(m.next_logits(&[9, 8, 1, 2]), m.next_logits(&[7, 1, 2]));
        assert_ne!(m.next_logits(&[9, 8, 1, 2]), m.next_logits(&[9, 8, 2, 1]));
    }

    #[test]
    fn perturbation_sd_matches_scale() {
        let m = model();
        let tok = 17usize;
        let n = 10_000;
        let xs: Vec<f64> = (0..n).map(|i| m.next_logits(&[i as u32 % 1024, (i / 1024) as u32])[tok]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let target = m.spec().logit_scale * NOISE_SD;
        assert!((sd - target).abs() < 0.1 * target, "sd {sd}");
    }

    #[test]
    fn softmax_closed_form() {
        let d = softmax(&LogitVector::new(vec![0.0, 3f64.ln()]).unwrap(), 1.0).unwrap();
        assert!((d.probs()[0] - 0.25).abs() < 1e-12);
        assert!((d.probs()[1] - 0.75).abs() < 1e-12);
        let u = softmax(&LogitVector::new(vec![1.5; 5]).unwrap(), 0.7).unwrap();
        assert!(u.probs().iter().all(|p| (p - 0.2).abs() < 1e-12));
        let cold = softmax(&LogitVector::new(vec![0.0, 1.0, 0.5]).unwrap(), 1e-3).unwrap();
        assert!(cold.probs()[1] > 1.0 - 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(LogitVector::new(vec![0.0, f64::NAN]).is_err());
        assert!(softmax(&LogitVector::new(vec![0.0]).unwrap(), 0.0).is_err());
    }

    #[test]
    fn constrain_behaviour() {
        let m = model();
        let l = m.next_logits(&[3, 4]);
        let all: Vec<TokenId> = (0..1024).collect();
        assert_eq!(constrain(&l, &all).unwrap(), l);
        assert!(constrain(&l, &[]).is_err());
        let single = softmax(&constrain(&l, &[42]).unwrap(), 1.0).unwrap();
        assert_eq!(single.probs()[42], 1.0);
        let allowed = [3u32, 10, 500];
        let a = softmax(&constrain(&l, &allowed).unwrap(), 1.0).unwrap();
        let full = softmax(&l, 1.0).unwrap();
        let z: f64 = allowed.iter().map(|&t| full.probs()[t as usize]).sum();
        for &t in &allowed {
            assert!((a.probs()[t as usize] - full.probs()[t as usize] / z).abs() < 1e-12);
        }
        assert_eq!(m.constrained_logits(&[3, 4], &allowed).unwrap(), constrain(&l, &allowed).unwrap());
    }

    #[test]
    fn generate_lengths_and_determinism() {
        let m = model();
        assert_eq!(generate(&m, &[1], 1, &mut Multinomial, 0).unwrap().len(), 1);
        let a = generate(&m, &[1, 2], 30, &mut Multinomial, 5).unwrap();
        let b = generate(&m, &[1, 2], 30, &mut Multinomial, 5).unwrap();
        assert_eq!(a, b);
        assert!(generate(&m, &[1], 0, &mut Multinomial, 0).is_err());
    }

    #[test]
    fn length_50_generations_are_distinct() {
        let m = ToyModel::new(ToyModelSpec::default()).unwrap();
        let mut seen = std::collections::HashSet::new();
        for s in 0..1000 {
            seen.insert(generate(&m, &[1, 2, 3], 50, &mut Multinomial, s).unwrap());
        }
        assert_eq!(seen.len(), 1000);
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(v in proptest::collection::vec(-50.0f64..50.0, 1..40), t in 0.05f64..5.0) {
            let d = softmax(&LogitVector::new(v).unwrap(), t).unwrap();
            let s: f64 = d.probs().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn context_locality(prefix_a in proptest::collection::vec(0u32..1024, 0..6),
                            prefix_b in proptest::collection::vec(0u32..1024, 0..6),
                            tail in proptest::collection::vec(0u32..1024, 2..3)) {
            let m = model();
            let mut a = prefix_a.clone(); a.extend(&tail);
            let mut b = prefix_b.clone(); b.extend(&tail);
            prop_assert_eq!(m.next_logits(&a), m.next_logits(&b));
        }
    }
}
