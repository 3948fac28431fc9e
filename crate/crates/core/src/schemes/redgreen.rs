//! Red-Green watermarks: LeftHash, SelfHash and the multi-key pool.

use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::SchemeError;
use crate::corelm::{softmax, softmax_values, Distribution, LmError, LogitVector, Sampler, Step, TokenId};
use crate::rng::{splitmix64, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RedGreenVariant {
    LeftHash,
    SelfHash,
}

impl RedGreenVariant {
    /// Tokens the partition seed reads. For SelfHash the last one is the
    /// candidate token itself.
    pub fn seed_window(self) -> usize {
        match self {
            RedGreenVariant::LeftHash => 1,
            RedGreenVariant::SelfHash => 4,
        }
    }

    /// Number of previous tokens the scheme looks at.
    pub fn context_size(self) -> usize {
        match self {
            RedGreenVariant::LeftHash => 1,
            RedGreenVariant::SelfHash => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RedGreenConfig {
    pub variant: RedGreenVariant,
    pub delta: f64,
    pub gamma: f64,
    pub keys: Vec<u64>,
    /// Rejection-loop cap as a multiple of |V| (SelfHash only).
    #[serde(default = "default_cap_factor")]
    pub cap_factor: usize,
}

fn default_cap_factor() -> usize {
    4
}

impl RedGreenConfig {
    pub fn new(variant: RedGreenVariant, delta: f64, gamma: f64, keys: Vec<u64>) -> Self {
        Self { variant, delta, gamma, keys, cap_factor: default_cap_factor() }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SchemeError::Config(format!("gamma {} outside (0,1)", self.gamma)));
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return Err(SchemeError::Config(format!("delta {} must be positive", self.delta)));
        }
        if self.keys.is_empty() {
            return Err(SchemeError::Config("key pool is empty".into()));
        }
        Ok(())
    }
}

/// Token hash: splitmix64 truncated to 63 bits.
#[inline]
pub fn token_hash(t: TokenId) -> u64 {
    splitmix64(t as u64) & (u64::MAX >> 1)
}

/// PRF seed for the partition. `context` must end with y_{t-1} for LeftHash
/// and with the candidate y_t for SelfHash.
pub fn partition_seed(key: u64, context: &[TokenId], variant: RedGreenVariant) -> Result<u64, SchemeError> {
    let need = variant.seed_window();
    if context.len() < need {
        return Err(SchemeError::ContextTooShort { need, got: context.len() });
    }
    let w = &context[context.len() - need..];
    Ok(match variant {
        RedGreenVariant::LeftHash => token_hash(w[0]).wrapping_mul(key),
        RedGreenVariant::SelfHash => {
            let min = w.iter().map(|&t| token_hash(t)).min().unwrap_or(0);
            min.wrapping_mul(token_hash(w[3])).wrapping_mul(key)
        }
    })
}

pub fn green_size(gamma: f64, vocab: usize) -> usize {
    ((gamma * vocab as f64).floor() as usize).min(vocab)
}

/// Green set as a membership mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreenSet {
    mask: Vec<bool>,
    size: usize,
}

impl GreenSet {
    /// Seeded forward Fisher-Yates; the first `k` slots are green.
    pub fn from_seed(seed: u64, vocab: usize, k: usize) -> Self {
        let mut order: Vec<TokenId> = (0..vocab as TokenId).collect();
        SplitMix64::new(seed).partial_shuffle(&mut order, k);
        let mut mask = vec![false; vocab];
        for &t in &order[..k.min(vocab)] {
            mask[t as usize] = true;
        }
        Self { mask, size: k.min(vocab) }
    }

    pub fn from_tokens(vocab: usize, tokens: &[TokenId]) -> Self {
        let mut mask = vec![false; vocab];
        for &t in tokens {
            mask[t as usize] = true;
        }
        let size = mask.iter().filter(|&&b| b).count();
        Self { mask, size }
    }

    #[inline]
    pub fn contains(&self, t: TokenId) -> bool {
        self.mask.get(t as usize).copied().unwrap_or(false)
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    pub fn members(&self) -> Vec<TokenId> {
        self.mask.iter().enumerate().filter(|(_, &g)| g).map(|(i, _)| i as TokenId).collect()
    }
}

pub fn redgreen_partition(
    key: u64,
    context: &[TokenId],
    gamma: f64,
    variant: RedGreenVariant,
    vocab: usize,
) -> Result<GreenSet, SchemeError> {
    let seed = partition_seed(key, context, variant)?;
    Ok(GreenSet::from_seed(seed, vocab, green_size(gamma, vocab)))
}

/// l'[i] = l[i] + δ on green coordinates.
pub fn apply_redgreen(l: &LogitVector, green: &GreenSet, delta: f64) -> LogitVector {
    let v = l.values().iter().enumerate().map(|(i, &x)| if green.contains(i as TokenId) { x + delta } else { x }).collect();
    LogitVector::new(v).expect("finite logits stay finite")
}

/// Stateful Red-Green sampler. Green sets are memoized by seed.
#[derive(Clone, Debug)]
pub struct RedGreenSampler {
    config: RedGreenConfig,
    vocab: usize,
    key: u64,
    memo: HashMap<u64, GreenSet>,
    fallbacks: u64,
}

const MEMO_LIMIT: usize = 4096;

impl RedGreenSampler {
    pub fn new(config: RedGreenConfig, vocab: usize) -> Result<Self, SchemeError> {
        config.validate()?;
        let key = config.keys[0];
        Ok(Self { config, vocab, key, memo: HashMap::new(), fallbacks: 0 })
    }

    pub fn config(&self) -> &RedGreenConfig {
        &self.config
    }

    /// Steps where SelfHash hit its iteration cap.
    pub fn fallbacks(&self) -> u64 {
        self.fallbacks
    }

    fn green(&mut self, seed: u64) -> &GreenSet {
        if self.memo.len() >= MEMO_LIMIT && !self.memo.contains_key(&seed) {
            self.memo.clear();
        }
        let (vocab, k) = (self.vocab, green_size(self.config.gamma, self.vocab));
        self.memo.entry(seed).or_insert_with(|| GreenSet::from_seed(seed, vocab, k))
    }

    fn pick_key(&mut self, rng: &mut dyn RngCore) {
        let n = self.config.keys.len();
        self.key = if n == 1 { self.config.keys[0] } else { self.config.keys[rng.random_range(0..n)] };
    }

    fn sample_with_key(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<TokenId, LmError> {
        let t = step.temperature;
        match self.config.variant {
            RedGreenVariant::LeftHash => {
                let seed = partition_seed(self.key, step.context, RedGreenVariant::LeftHash)?;
                let delta = self.config.delta;
                let boosted = apply_redgreen(step.logits, self.green(seed), delta);
                Ok(softmax(&boosted, t)?.sample(rng))
            }
            RedGreenVariant::SelfHash => {
                let (tok, fell_back) = self.selfhash_draw(step, rng)?;
                if fell_back {
                    self.fallbacks += 1;
                }
                Ok(tok)
            }
        }
    }

    /// Same draw as the dense path when every token outside `tokens` is
    /// masked. `tokens` must be ascending.
    pub fn sample_sparse(
        &mut self,
        tokens: &[TokenId],
        logits: &[f64],
        context: &[TokenId],
        temperature: f64,
        rng: &mut dyn RngCore,
    ) -> Result<TokenId, LmError> {
        let delta = self.config.delta;
        match self.config.variant {
            RedGreenVariant::LeftHash => {
                let seed = partition_seed(self.key, context, RedGreenVariant::LeftHash)?;
                let green = self.green(seed);
                let boosted: Vec<f64> =
                    tokens.iter().zip(logits).map(|(&t, &l)| if green.contains(t) { l + delta } else { l }).collect();
                let p = softmax_values(&boosted, temperature)?;
                Ok(tokens[p.sample(rng) as usize])
            }
            RedGreenVariant::SelfHash => {
                if context.len() < 3 {
                    return Err(SchemeError::ContextTooShort { need: 3, got: context.len() }.into());
                }
                let p = softmax_values(logits, temperature)?;
                let accept_red = (-delta / temperature).exp();
                let n = context.len();
                let mut window = [context[n - 3], context[n - 2], context[n - 1], 0];
                let cap = self.config.cap_factor.max(1) * self.vocab;
                for _ in 0..cap {
                    let w = tokens[p.sample(rng) as usize];
                    window[3] = w;
                    let seed = partition_seed(self.key, &window, RedGreenVariant::SelfHash)?;
                    if self.green(seed).contains(w) || rng.random::<f64>() < accept_red {
                        return Ok(w);
                    }
                }
                self.fallbacks += 1;
                Ok(tokens[p.sample(rng) as usize])
            }
        }
    }

    /// Rejection sampling from q(w) ∝ p(w)·exp(δ·green_w(w)/T): propose from
    /// p, accept green proposals always and red ones with prob exp(−δ/T).
    fn selfhash_draw(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<(TokenId, bool), LmError> {
        let ctx = step.context;
        if ctx.len() < 3 {
            return Err(SchemeError::ContextTooShort { need: 3, got: ctx.len() }.into());
        }
        let p: Distribution = softmax(step.logits, step.temperature)?;
        let accept_red = (-self.config.delta / step.temperature).exp();
        let mut window = [ctx[ctx.len() - 3], ctx[ctx.len() - 2], ctx[ctx.len() - 1], 0];
        let cap = self.config.cap_factor.max(1) * self.vocab;
        for _ in 0..cap {
            let w = p.sample(rng);
            window[3] = w;
            let seed = partition_seed(self.key, &window, RedGreenVariant::SelfHash)?;
            if self.green(seed).contains(w) || rng.random::<f64>() < accept_red {
                return Ok((w, false));
            }
        }
        Ok((p.sample(rng), true))
    }
}

impl Sampler for RedGreenSampler {
    fn begin_generation(&mut self, rng: &mut dyn RngCore) {
        self.pick_key(rng);
    }

    fn sample(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<TokenId, LmError> {
        self.sample_with_key(step, rng)
    }
}

/// Single watermarked draw with a freshly picked key.
pub fn redgreen_sample(
    config: &RedGreenConfig,
    l: &LogitVector,
    context: &[TokenId],
    temperature: f64,
    rng: &mut dyn RngCore,
) -> Result<TokenId, LmError> {
    let mut s = RedGreenSampler::new(config.clone(), l.len())?;
    s.pick_key(rng);
    s.sample_with_key(&Step { logits: l, context, position: 0, temperature }, rng)
}
