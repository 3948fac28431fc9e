//! Local simulator adapter: the toy model behind a watermark sampler,
//! answering semantic queries directly.
//!
//! Choice and cache probes are scored by a second toy model instance that
//! shares the base biases but hashes only the semantic content of the probe
//! (instruction, prefix, digit or fruit pair) and uses its own, smaller
//! logit scale. The watermark sampler still sees the literal token stream,
//! so perturbation digits and repeat counts only matter through the
//! watermark.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::STORY_PROMPTS;
use super::vocab::Vocab;
use super::{BlackBox, BlackBoxError, CacheProbe, ChoiceProbe, DiversityProbe, Response, SemanticQuery};
use crate::corelm::{generate_with_rng, LmError, Sampler, TokenId, TokenSeq, ToyModel, ToyModelSpec};
use crate::schemes::{SchemeConfig, SchemeSampler};

pub const DEFAULT_CHOICE_LOGIT_SCALE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    pub model: ToyModelSpec,
    pub watermark: SchemeConfig,
    /// Logit scale of the per-context noise in choice and cache probes.
    pub choice_logit_scale: f64,
    /// Seed of the sampling randomness (independent of the model seed).
    pub sample_seed: u64,
    /// Probability that a choice or cache probe ignores the instruction.
    pub invalid_rate: f64,
}

impl Default for SimulatorConfig {
    fn default() -> Self {
        Self {
            model: ToyModelSpec::default(),
            watermark: SchemeConfig::None,
            choice_logit_scale: DEFAULT_CHOICE_LOGIT_SCALE,
            sample_seed: 0,
            invalid_rate: 0.0,
        }
    }
}

pub struct Simulator {
    config: SimulatorConfig,
    model: ToyModel,
    choice_model: ToyModel,
    sampler: SchemeSampler,
    vocab: Vocab,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for Simulator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Simulator").field("config", &self.config).finish()
    }
}

fn sim_err(e: impl std::fmt::Display) -> BlackBoxError {
    BlackBoxError::Simulator(e.to_string())
}

impl Simulator {
    pub fn new(config: SimulatorConfig) -> Result<Self, BlackBoxError> {
        if !(0.0..1.0).contains(&config.invalid_rate) {
            return Err(BlackBoxError::Config(format!("invalid_rate {} outside [0, 1)", config.invalid_rate)));
        }
        let model = ToyModel::new(config.model.clone()).map_err(sim_err)?;
        let choice_spec = ToyModelSpec { base_context: 3, logit_scale: config.choice_logit_scale, ..config.model.clone() };
        let choice_model = ToyModel::new(choice_spec).map_err(sim_err)?;
        let vocab = Vocab::new(config.model.vocab_size).map_err(BlackBoxError::Config)?;
        let sampler = config.watermark.sampler(config.model.vocab_size).map_err(sim_err)?;
        let rng = ChaCha8Rng::seed_from_u64(config.sample_seed);
        Ok(Self { config, model, choice_model, sampler, vocab, rng })
    }

    pub fn config(&self) -> &SimulatorConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn sampler(&self) -> &SchemeSampler {
        &self.sampler
    }

    fn word_tokens(&self, words: &[String]) -> Result<Vec<TokenId>, BlackBoxError> {
        let toks: Vec<TokenId> = words.iter().map(|w| self.vocab.token(w)).collect();
        for (i, t) in toks.iter().enumerate() {
            if toks[..i].contains(t) {
                return Err(BlackBoxError::InvalidQuery(format!("choices '{}' share a token", words[i])));
            }
        }
        Ok(toks)
    }

    fn tag(&self, w: &str) -> TokenId {
        self.vocab.token(w)
    }

    /// Whether this query ignores the instruction.
    fn fails_instruction(&mut self) -> bool {
        self.config.invalid_rate > 0.0 && self.rng.random::<f64>() < self.config.invalid_rate
    }

    fn invalid(&self) -> Response {
        Response { text: Some("I cannot help with that.".into()), tokens: None, parsed_choice: None, valid: false, latency_ms: 0.0, token_count: 5 }
    }

    fn choose(&mut self, lm_ctx: &[TokenId], wm_ctx: &[TokenId], choices: &[TokenId]) -> Result<TokenId, BlackBoxError> {
        let mut sorted = choices.to_vec();
        sorted.sort_unstable();
        let logits = self.choice_model.logits_for(lm_ctx, &sorted).map_err(sim_err)?;
        let (t, v) = (self.model.temperature(), self.config.model.vocab_size);
        self.sampler.sample_sparse(&sorted, &logits, wm_ctx, t, v, &mut self.rng).map_err(sim_err)
    }

    /// Watermark-side token stream of a choice probe:
    /// instruction words, t1, the optional perturbation digit, then d × H.
    pub fn choice_stream(&self, c: &ChoiceProbe) -> TokenSeq {
        let mut s = vec![self.tag("complete"), self.tag("the"), self.tag("sentence")];
        s.extend(self.vocab.tokens(&c.prefix));
        s.extend(c.perturb.map(|d| d as TokenId));
        s.extend(std::iter::repeat_n(c.digit as TokenId, c.repeat));
        s
    }

    fn ask_choice(&mut self, c: &ChoiceProbe) -> Result<Response, BlackBoxError> {
        let choices = self.word_tokens(&c.choices)?;
        let mut lm_ctx = vec![self.tag("complete")];
        lm_ctx.extend(self.vocab.tokens(&c.prefix));
        lm_ctx.push(c.digit as TokenId);
        let wm_ctx = self.choice_stream(c);
        self.sampler.begin_generation(&mut self.rng);
        if self.fails_instruction() {
            return Ok(self.invalid());
        }
        let tok = self.choose(&lm_ctx, &wm_ctx, &choices)?;
        let idx = choices.iter().position(|&t| t == tok).ok_or_else(|| sim_err("sampled outside the choice set"))?;
        Ok(Response {
            text: Some(c.choices[idx].clone()),
            tokens: Some(vec![tok]),
            parsed_choice: Some(idx),
            valid: true,
            latency_ms: 0.0,
            token_count: 1,
        })
    }

    fn ask_cache(&mut self, c: &CacheProbe) -> Result<Response, BlackBoxError> {
        let choices = self.word_tokens(&c.choices)?;
        let uc: Vec<TokenId> = c.uc.iter().map(|w| self.vocab.token(w)).collect();
        let example = self.vocab.token(&c.example);
        let lm_ctx = [self.tag("pick"), example, choices[0], choices[1]];
        let mut ctx: TokenSeq = uc.clone();
        for w in ["pick", "a", "fruit", "between"] {
            ctx.push(self.tag(w));
        }
        ctx.extend([choices[0], self.tag("and"), choices[1]]);
        for w in ["use", "the", "following", "format"] {
            ctx.push(self.tag(w));
        }
        ctx.extend(&uc);
        ctx.push(example);
        self.sampler.begin_generation(&mut self.rng);
        if self.fails_instruction() {
            return Ok(self.invalid());
        }
        // Forced echo of uc; each echoed position passes through the cache.
        for &t in &uc {
            self.sampler.observe_forced(&ctx, t);
            ctx.push(t);
        }
        let tok = self.choose(&lm_ctx, &ctx, &choices)?;
        let idx = if tok == choices[0] { 0 } else { 1 };
        let mut toks = uc;
        toks.push(tok);
        let text = c.uc.iter().chain(std::iter::once(&c.choices[idx])).cloned().collect::<Vec<_>>().join(" ");
        Ok(Response { text: Some(text), token_count: toks.len(), tokens: Some(toks), parsed_choice: Some(idx), valid: true, latency_ms: 0.0 })
    }

    fn ask_diversity(&mut self, d: &DiversityProbe) -> Result<Response, BlackBoxError> {
        let prompt = self.vocab.tokens(STORY_PROMPTS[d.prompt_id % STORY_PROMPTS.len()]);
        let toks = generate_with_rng(&self.model, &prompt, d.target_length, &mut self.sampler, &mut self.rng)
            .map_err(|e: LmError| sim_err(e))?;
        let text = toks.iter().map(|&t| self.vocab.word(t)).collect::<Vec<_>>().join(" ");
        Ok(Response { text: Some(text), token_count: toks.len(), tokens: Some(toks), parsed_choice: None, valid: true, latency_ms: 0.0 })
    }
}

impl BlackBox for Simulator {
    fn id(&self) -> String {
        let scheme = match &self.config.watermark {
            SchemeConfig::None => "none".to_string(),
            SchemeConfig::RedGreen(c) => format!("red_green/{:?}", c.variant).to_lowercase(),
            SchemeConfig::FixedSampling(c) => format!("fixed_sampling/{:?}", c.variant).to_lowercase(),
            SchemeConfig::Cache(c) => format!("cache/{:?}", c.variant).to_lowercase(),
        };
        format!("simulator:{scheme}:seed={}", self.config.model.seed)
    }

    fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError> {
        q.validate()?;
        match q {
            SemanticQuery::Choice(c) => self.ask_choice(c),
            SemanticQuery::Cache(c) => self.ask_cache(c),
            SemanticQuery::Diversity(d) => self.ask_diversity(d),
        }
    }

    fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
        self.sampler.reset_cache();
        Ok(())
    }

    fn rare_words(&self) -> Option<Vec<String>> {
        Some(self.vocab.rare_words())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corelm::softmax;
    use crate::schemes::{CacheConfig, CacheVariant, FixedSamplingConfig, FixedVariant, WatermarkKey};

    fn sim(watermark: SchemeConfig, seed: u64) -> Simulator {
        Simulator::new(SimulatorConfig { watermark, sample_seed: seed, ..Default::default() }).unwrap()
    }

    fn choice(choices: &[&str]) -> SemanticQuery {
        SemanticQuery::Choice(ChoiceProbe {
            prefix: "I bought".into(),
            digit: 7,
            repeat: 4,
            choices: choices.iter().map(|s| s.to_string()).collect(),
            perturb: None,
        })
    }

    #[test]
    fn singleton_choice_is_returned() {
        let mut s = sim(SchemeConfig::None, 1);
        let r = s.ask(&choice(&["pears"])).unwrap();
        assert!(r.valid);
        assert_eq!(r.parsed_choice, Some(0));
        assert_eq!(r.text.as_deref(), Some("pears"));
    }

    #[test]
    fn unwatermarked_diversity_is_full() {
        let mut s = sim(SchemeConfig::None, 2);
        let q = SemanticQuery::Diversity(DiversityProbe { prompt_id: 0, target_length: 50 });
        let set: std::collections::HashSet<_> = (0..1000).map(|_| s.ask(&q).unwrap().tokens.unwrap()).collect();
        assert_eq!(set.len(), 1000);
    }

    #[test]
    fn fixed_sampling_diversity_is_capped() {
        let wm = SchemeConfig::FixedSampling(FixedSamplingConfig { variant: FixedVariant::Its, n_key: 16, key_seed: 4 });
        let mut s = sim(wm, 3);
        let q = SemanticQuery::Diversity(DiversityProbe { prompt_id: 0, target_length: 20 });
        let set: std::collections::HashSet<_> = (0..300).map(|_| s.ask(&q).unwrap().tokens.unwrap()).collect();
        assert!(set.len() <= 16);
    }

    /// Repeating the same cache probe without reset: after the first
    /// (watermarked) answer every later answer is a cache hit and follows
    /// the unwatermarked choice distribution.
    #[test]
    fn cache_hits_follow_true_distribution() {
        let key = WatermarkKey::from_seed(9, 64);
        let wm = SchemeConfig::Cache(CacheConfig::new(CacheVariant::DeltaReweight, 0.0, key));
        let mut s = sim(wm, 5);
        let words = s.vocab().rare_words();
        let q = SemanticQuery::Cache(CacheProbe {
            uc: words[..32].to_vec(),
            choices: ["apples".into(), "pears".into()],
            example: "mangoes".into(),
        });
        let lm_ctx = [s.tag("pick"), s.vocab.token("mangoes"), s.vocab.token("apples"), s.vocab.token("pears")];
        let l = s.choice_model.constrained_logits(&lm_ctx, &[10, 14]).unwrap();
        let p1 = softmax(&l, 1.0).unwrap().probs()[10];
        s.ask(&q).unwrap();
        let n = 20_000;
        let k = (0..n).filter(|_| s.ask(&q).unwrap().parsed_choice == Some(0)).count();
        let se = (p1 * (1.0 - p1) / n as f64).sqrt();
        assert!(((k as f64 / n as f64) - p1).abs() < 4.0 * se, "{} vs {p1}", k as f64 / n as f64);
        // With a reset before each probe, δ-reweight answers are deterministic.
        let mut first = None;
        for _ in 0..50 {
            s.reset_cache().unwrap();
            s.reset_cache().unwrap();
            let c = s.ask(&q).unwrap().parsed_choice;
            assert_eq!(*first.get_or_insert(c), c);
        }
    }

    #[test]
    fn invalid_rate_produces_invalid_responses() {
        let mut s = Simulator::new(SimulatorConfig { invalid_rate: 0.5, ..Default::default() }).unwrap();
        let n = (0..400).filter(|_| !s.ask(&choice(&["apples", "pears"])).unwrap().valid).count();
        assert!((150..250).contains(&n), "{n}");
    }

    #[test]
    fn duplicate_choice_tokens_rejected() {
        let mut s = sim(SchemeConfig::None, 0);
        assert!(s.ask(&choice(&["apples", "Apples"])).is_err());
    }
}
