//! Fixed-Sampling watermarks (ITS and EXP) driven by a rotated key sequence.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::SchemeError;
use crate::corelm::{generate_with_rng, softmax, Distribution, LmError, Sampler, Step, TokenId, TokenSeq, ToyModel};
use crate::rng::{mix, open_unit_f64, unit_f64, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedVariant {
    Its,
    Exp,
}

/// One position of the key.
#[derive(Clone, Debug, PartialEq)]
pub enum KeyEntry {
    Its { u: f64, perm: Vec<TokenId> },
    Exp { u: Vec<f64> },
}

#[derive(Debug)]
enum KeySource {
    Derived { seed: u64, n_key: usize, vocab: usize },
    Explicit(Vec<KeyEntry>),
}

const U_TAG: u64 = 0x7573;
const PERM_TAG: u64 = 0x7065_726d;

/// A key sequence ξ with a cyclic offset applied.
#[derive(Clone, Debug)]
pub struct KeySequence {
    variant: FixedVariant,
    source: Arc<KeySource>,
    offset: usize,
}

impl KeySequence {
    /// Key whose entries are derived on demand from a seed.
    pub fn derived(variant: FixedVariant, seed: u64, n_key: usize, vocab: usize) -> Result<Self, SchemeError> {
        if n_key == 0 {
            return Err(SchemeError::Config("n_key must be at least 1".into()));
        }
        Ok(Self { variant, source: Arc::new(KeySource::Derived { seed, n_key, vocab }), offset: 0 })
    }

    pub fn explicit(variant: FixedVariant, entries: Vec<KeyEntry>) -> Result<Self, SchemeError> {
        if entries.is_empty() {
            return Err(SchemeError::Config("n_key must be at least 1".into()));
        }
        for e in &entries {
            match (variant, e) {
                (FixedVariant::Its, KeyEntry::Its { u, .. }) if (0.0..=1.0).contains(u) => {}
                (FixedVariant::Exp, KeyEntry::Exp { u }) if u.iter().all(|x| *x > 0.0 && *x < 1.0) => {}
                _ => return Err(SchemeError::Config("key entry does not match variant".into())),
            }
        }
        Ok(Self { variant, source: Arc::new(KeySource::Explicit(entries)), offset: 0 })
    }

    pub fn variant(&self) -> FixedVariant {
        self.variant
    }

    pub fn n_key(&self) -> usize {
        match &*self.source {
            KeySource::Derived { n_key, .. } => *n_key,
            KeySource::Explicit(e) => e.len(),
        }
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    fn index(&self, t: usize) -> usize {
        (t % self.n_key() + self.offset) % self.n_key()
    }

    /// ξ̄[t], with t reduced cyclically.
    pub fn entry(&self, t: usize) -> KeyEntry {
        let i = self.index(t);
        match &*self.source {
            KeySource::Explicit(e) => e[i].clone(),
            KeySource::Derived { seed, vocab, .. } => {
                let es = mix(*seed, i as u64);
                match self.variant {
                    FixedVariant::Its => {
                        let mut perm: Vec<TokenId> = (0..*vocab as TokenId).collect();
                        SplitMix64::new(mix(es, PERM_TAG)).partial_shuffle(&mut perm, *vocab);
                        KeyEntry::Its { u: unit_f64(mix(es, U_TAG)), perm }
                    }
                    FixedVariant::Exp => KeyEntry::Exp { u: (0..*vocab as u64).map(|j| open_unit_f64(mix(es, j))).collect() },
                }
            }
        }
    }

    /// Sample position t directly; avoids materializing full EXP vectors.
    fn sample_at(&self, t: usize, p: &Distribution) -> Result<TokenId, SchemeError> {
        match (&*self.source, self.variant) {
            (KeySource::Derived { seed, .. }, FixedVariant::Exp) => {
                let es = mix(*seed, self.index(t) as u64);
                exp_argmin(p, |j| open_unit_f64(mix(es, j as u64)))
            }
            _ => match self.entry(t) {
                KeyEntry::Its { u, perm } => Ok(its_sample(p, u, &perm)),
                KeyEntry::Exp { u } => exp_sample(p, &u),
            },
        }
    }
}

impl PartialEq for KeySequence {
    fn eq(&self, other: &Self) -> bool {
        self.variant == other.variant
            && self.n_key() == other.n_key()
            && (0..self.n_key()).all(|t| self.entry(t) == other.entry(t))
    }
}

/// ξ̄[t] = ξ[(t + offset) mod n_key]. Offsets compose additively.
pub fn rotate_key(key: &KeySequence, offset: usize) -> Result<KeySequence, SchemeError> {
    let n = key.n_key();
    if offset >= n {
        return Err(SchemeError::Config(format!("offset {offset} not below n_key {n}")));
    }
    Ok(KeySequence { variant: key.variant, source: key.source.clone(), offset: (key.offset + offset) % n })
}

/// First token in π order whose cumulative mass reaches u.
pub fn its_sample(p: &Distribution, u: f64, perm: &[TokenId]) -> TokenId {
    let probs = p.probs();
    let mut cum = 0.0;
    let mut last = None;
    for &t in perm {
        let pt = probs[t as usize];
        if pt > 0.0 {
            cum += pt;
            last = Some(t);
            if cum >= u {
                return t;
            }
        }
    }
    last.unwrap_or(perm[0])
}

/// argmin over i with p_i > 0 of −ln(u_i)/p_i.
pub fn exp_sample(p: &Distribution, u: &[f64]) -> Result<TokenId, SchemeError> {
    exp_argmin(p, |i| u[i])
}

fn exp_argmin(p: &Distribution, u: impl Fn(usize) -> f64) -> Result<TokenId, SchemeError> {
    let mut best = None;
    let mut best_score = f64::INFINITY;
    for (i, &pi) in p.probs().iter().enumerate() {
        if pi > 0.0 {
            let s = -u(i).ln() / pi;
            if s < best_score || best.is_none() {
                best_score = s;
                best = Some(i as TokenId);
            }
        }
    }
    best.ok_or(SchemeError::NoMass)
}

/// Serializable parameters; the key itself is derived from `key_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedSamplingConfig {
    pub variant: FixedVariant,
    pub n_key: usize,
    pub key_seed: u64,
}

impl FixedSamplingConfig {
    pub fn key(&self, vocab: usize) -> Result<KeySequence, SchemeError> {
        KeySequence::derived(self.variant, self.key_seed, self.n_key, vocab)
    }
}

/// Draws one rotation per generation and samples deterministically.
#[derive(Clone, Debug)]
pub struct FixedSampler {
    key: KeySequence,
    current: KeySequence,
}

impl FixedSampler {
    pub fn new(key: KeySequence) -> Self {
        Self { current: key.clone(), key }
    }

    pub fn from_config(config: &FixedSamplingConfig, vocab: usize) -> Result<Self, SchemeError> {
        Ok(Self::new(config.key(vocab)?))
    }

    /// Offset used by the current generation.
    pub fn offset(&self) -> usize {
        self.current.offset()
    }

    pub fn set_offset(&mut self, offset: usize) -> Result<(), SchemeError> {
        self.current = rotate_key(&self.key, offset)?;
        Ok(())
    }
}

impl Sampler for FixedSampler {
    fn begin_generation(&mut self, rng: &mut dyn RngCore) {
        let off = rng.random_range(0..self.key.n_key());
        self.current = rotate_key(&self.key, off).expect("offset below n_key");
    }

    fn sample(&mut self, step: &Step<'_>, _rng: &mut dyn RngCore) -> Result<TokenId, LmError> {
        let p = softmax(step.logits, step.temperature)?;
        Ok(self.current.sample_at(step.position, &p)?)
    }
}

pub fn fixedsampling_generate(
    config: &FixedSamplingConfig,
    model: &ToyModel,
    prompt: &[TokenId],
    t: usize,
    rng: &mut dyn RngCore,
) -> Result<TokenSeq, LmError> {
    let mut s = FixedSampler::from_config(config, model.vocab_size())?;
    generate_with_rng(model, prompt, t, &mut s, rng)
}
