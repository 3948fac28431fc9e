//! Cache-augmented distribution-preserving watermarks: δ-reweight,
//! γ-reweight and DiPmark, with a cache of previously seen contexts.

use std::collections::HashSet;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SchemeError;
use crate::corelm::{softmax, Distribution, LmError, Sampler, Step, TokenId};
use crate::rng::{mix, unit_f64, SplitMix64};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheVariant {
    DeltaReweight,
    GammaReweight,
    #[serde(rename = "dipmark")]
    DiPmark,
}

/// Bit-string key ξ ∈ Z₂^K. Serialized as a string of '0'/'1'.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct WatermarkKey {
    bits: Vec<bool>,
}

impl WatermarkKey {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// K pseudo-random bits from a seed.
    pub fn from_seed(seed: u64, k: usize) -> Self {
        let mut g = SplitMix64::new(mix(seed, 0x6b6579));
        let mut bits = Vec::with_capacity(k);
        while bits.len() < k {
            let w = g.next_u64();
            for b in (0..64).rev() {
                if bits.len() < k {
                    bits.push((w >> b) & 1 == 1);
                }
            }
        }
        Self { bits }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Bits packed most-significant first, zero-padded in the final byte.
    pub fn packed(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << (7 - i))))
            .collect()
    }
}

impl TryFrom<String> for WatermarkKey {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(format!("key bit must be 0 or 1, found {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self::from_bits)
    }
}

impl From<WatermarkKey> for String {
    fn from(k: WatermarkKey) -> String {
        k.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheConfig {
    pub variant: CacheVariant,
    #[serde(default)]
    pub alpha: f64,
    pub key: WatermarkKey,
    #[serde(default = "default_h")]
    pub h: usize,
    #[serde(default = "default_capacity")]
    pub cache_capacity: u64,
}

fn default_h() -> usize {
    5
}

fn default_capacity() -> u64 {
    10_000
}

impl CacheConfig {
    pub fn new(variant: CacheVariant, alpha: f64, key: WatermarkKey) -> Self {
        Self { variant, alpha, key, h: default_h(), cache_capacity: default_capacity() }
    }

    pub fn validate(&self) -> Result<(), SchemeError> {
        if !(0.0..=0.5).contains(&self.alpha) {
            return Err(SchemeError::Config(format!("alpha {} outside [0, 0.5]", self.alpha)));
        }
        if self.h == 0 {
            return Err(SchemeError::Config("h must be at least 1".into()));
        }
        if self.cache_capacity == 0 {
            return Err(SchemeError::Config("cache_capacity must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step pseudorandom code E_t.
#[derive(Clone, Debug, PartialEq)]
pub enum Code {
    /// Scalar in [0, 1) for δ-reweight.
    Uniform(f64),
    /// Token placed at each permutation position.
    Permutation(Vec<TokenId>),
}

/// SHA256("WMCACHE" ‖ K as u64 BE ‖ packed key bits ‖ context ids as u32 BE).
pub fn cache_digest(key: &WatermarkKey, context: &[TokenId]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"WMCACHE");
    h.update((key.bits.len() as u64).to_be_bytes());
    h.update(key.packed());
    for &t in context {
        h.update(t.to_be_bytes());
    }
    h.finalize().into()
}

pub fn code_seed(key: &WatermarkKey, context: &[TokenId]) -> u64 {
    let d = cache_digest(key, context);
    u64::from_be_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

pub fn cache_code(key: &WatermarkKey, context: &[TokenId], variant: CacheVariant, vocab: usize) -> Code {
    let mut g = SplitMix64::new(code_seed(key, context));
    match variant {
        CacheVariant::DeltaReweight => Code::Uniform(unit_f64(g.next_u64())),
        CacheVariant::GammaReweight | CacheVariant::DiPmark => {
            let mut order: Vec<TokenId> = (0..vocab as TokenId).collect();
            g.shuffle(&mut order);
            Code::Permutation(order)
        }
    }
}

/// f₂ of the reweighting family. γ-reweight is DiPmark at α = 0.5.
#[inline]
pub fn f2(v: f64, alpha: f64) -> f64 {
    (v - alpha).max(0.0) + (v - (1.0 - alpha)).max(0.0)
}

pub fn variant_alpha(variant: CacheVariant, alpha: f64) -> f64 {
    match variant {
        CacheVariant::GammaReweight => 0.5,
        _ => alpha,
    }
}

/// p'(i) = f₂(F(pos(i))) − f₂(F(pos(i) − 1)) with F the CDF in permutation order.
pub fn reweight(p: &Distribution, order: &[TokenId], alpha: f64) -> Result<Distribution, SchemeError> {
    let probs = p.probs();
    let mut out = vec![0.0; probs.len()];
    let mut cum = 0.0;
    let mut prev_f = f2(0.0, alpha);
    for &t in order {
        cum += probs[t as usize];
        let f = f2(cum.min(1.0), alpha);
        out[t as usize] = (f - prev_f).max(0.0);
        prev_f = f;
    }
    Distribution::from_weights(out).map_err(|e| SchemeError::Config(e.to_string()))
}

/// Inverse-CDF in index order.
pub fn delta_reweight_sample(p: &Distribution, e: f64) -> TokenId {
    p.quantile(e)
}

/// Set of seen h-token contexts plus the generation counter.
#[derive(Clone, Debug, Default)]
pub struct ContextCache {
    entries: HashSet<Vec<TokenId>>,
    generation_counter: u64,
    capacity: u64,
}

impl ContextCache {
    pub fn new(capacity: u64) -> Self {
        Self { entries: HashSet::new(), generation_counter: 0, capacity: capacity.max(1) }
    }

    pub fn contains(&self, ctx: &[TokenId]) -> bool {
        self.entries.contains(ctx)
    }

    pub fn insert(&mut self, ctx: &[TokenId]) {
        self.entries.insert(ctx.to_vec());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn clear(&mut self) {
        self.entries.clear();
        self.generation_counter = 0;
    }

    /// Starts a generation; the cache is emptied once G generations ran.
    pub fn begin_generation(&mut self) {
        if self.generation_counter >= self.capacity {
            self.clear();
        }
        self.generation_counter += 1;
    }

    pub fn generation_counter(&self) -> u64 {
        self.generation_counter
    }
}

/// One decoding step with cache bypass.
pub fn cached_step(
    cache: &mut ContextCache,
    config: &CacheConfig,
    p: &Distribution,
    context: &[TokenId],
    rng: &mut dyn RngCore,
) -> Result<TokenId, SchemeError> {
    if context.len() < config.h {
        return Err(SchemeError::ContextTooShort { need: config.h, got: context.len() });
    }
    let ctx = &context[context.len() - config.h..];
    if cache.contains(ctx) {
        return Ok(p.sample(rng));
    }
    let tok = match cache_code(&config.key, ctx, config.variant, p.len()) {
        Code::Uniform(e) => delta_reweight_sample(p, e),
        Code::Permutation(order) => reweight(p, &order, variant_alpha(config.variant, config.alpha))?.sample(rng),
    };
    cache.insert(ctx);
    Ok(tok)
}

#[derive(Clone, Debug)]
pub struct CacheSampler {
    config: CacheConfig,
    cache: ContextCache,
}

impl CacheSampler {
    pub fn new(config: CacheConfig) -> Result<Self, SchemeError> {
        config.validate()?;
        let cache = ContextCache::new(config.cache_capacity);
        Ok(Self { config, cache })
    }

    pub fn cache(&self) -> &ContextCache {
        &self.cache
    }

    pub fn reset_cache(&mut self) {
        self.cache.clear();
    }
}

impl Sampler for CacheSampler {
    fn begin_generation(&mut self, _rng: &mut dyn RngCore) {
        self.cache.begin_generation();
    }

    fn sample(&mut self, step: &Step<'_>, rng: &mut dyn RngCore) -> Result<TokenId, LmError> {
        let p = softmax(step.logits, step.temperature)?;
        Ok(cached_step(&mut self.cache, &self.config, &p, step.context, rng)?)
    }

    fn observe_forced(&mut self, context: &[TokenId], _token: TokenId) {
        if context.len() >= self.config.h {
            self.cache.insert(&context[context.len() - self.config.h..]);
        }
    }
}
