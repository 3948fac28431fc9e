//! Transport-independent black-box model access.
//!
//! Detectors speak in [`SemanticQuery`] values. Adapters either interpret
//! them directly (the simulator) or render them to prompt text (HTTP and the
//! text front-end). Every interaction goes through a [`BlackBoxHandle`], which
//! enforces the query budget and appends to the [`Transcript`].

pub mod http;
pub mod render;
pub mod replay;
pub mod simulator;
pub mod text;
pub mod vocab;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corelm::TokenSeq;

pub use render::{parse_choice, render_prompt};
pub use simulator::{Simulator, SimulatorConfig};

#[derive(Debug, Error)]
pub enum BlackBoxError {
    #[error("transport error (retryable: {retryable}): {message}")]
    Transport { retryable: bool, message: String },
    #[error("operation not supported by this adapter: {0}")]
    Unsupported(String),
    #[error("query budget exhausted after {used} queries (budget {budget})")]
    BudgetExhausted { used: u64, budget: u64 },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("replay mismatch at record {index}: {message}")]
    ReplayMismatch { index: usize, message: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("simulator error: {0}")]
    Simulator(String),
}

impl BlackBoxError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BlackBoxError::Transport { retryable: true, .. })
    }
}

/// Constrained single-word choice after "{prefix} {perturb} {digit × repeat}".
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChoiceProbe {
    pub prefix: String,
    pub digit: u8,
    pub repeat: usize,
    pub choices: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturb: Option<u8>,
}

/// Free generation of `target_length` tokens from a fixed story prompt.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiversityProbe {
    pub prompt_id: usize,
    pub target_length: usize,
}

/// Echo of an uncommon prefix followed by a choice between two fruits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheProbe {
    pub uc: Vec<String>,
    pub choices: [String; 2],
    pub example: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SemanticQuery {
    Choice(ChoiceProbe),
    Diversity(DiversityProbe),
    Cache(CacheProbe),
}

impl SemanticQuery {
    pub fn validate(&self) -> Result<(), BlackBoxError> {
        let bad = |m: &str| Err(BlackBoxError::InvalidQuery(m.to_string()));
        match self {
            SemanticQuery::Choice(c) => {
                if c.choices.is_empty() {
                    return bad("choice list is empty");
                }
                if c.repeat == 0 && c.perturb.is_none() {
                    return bad("repeat must be at least 1 without a perturbation digit");
                }
                if c.digit > 9 || c.perturb.is_some_and(|d| d > 9) {
                    return bad("digits must be 0-9");
                }
                if c.prefix.split_whitespace().next().is_none() {
                    return bad("prefix is empty");
                }
            }
            SemanticQuery::Diversity(d) => {
                if d.target_length == 0 {
                    return bad("target_length must be at least 1");
                }
                if d.prompt_id >= render::STORY_PROMPTS.len() {
                    return bad("unknown prompt_id");
                }
            }
            SemanticQuery::Cache(c) => {
                if c.uc.is_empty() {
                    return bad("uncommon prefix is empty");
                }
                if c.choices[0] == c.choices[1] {
                    return bad("cache choices must differ");
                }
            }
        }
        Ok(())
    }

    /// Choice list for probes that have one.
    pub fn choices(&self) -> Option<Vec<String>> {
        match self {
            SemanticQuery::Choice(c) => Some(c.choices.clone()),
            SemanticQuery::Cache(c) => Some(c.choices.to_vec()),
            SemanticQuery::Diversity(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<TokenSeq>,
    pub parsed_choice: Option<usize>,
    pub valid: bool,
    pub latency_ms: f64,
    pub token_count: usize,
}

impl Response {
    /// Identity of a free-generation response truncated to `t` units
    /// (tokens on the simulator, whitespace words for text adapters).
    pub fn content_key(&self, t: usize) -> Option<String> {
        if let Some(toks) = &self.tokens {
            if toks.len() < t {
                return None;
            }
            return Some(toks[..t].iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "));
        }
        let text = self.text.as_ref()?;
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.len() < t {
            return None;
        }
        Some(words[..t].join(" "))
    }
}

/// A model reachable only through its text responses.
pub trait BlackBox: Send {
    fn id(&self) -> String;

    fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError>;

    fn reset_cache(&mut self) -> Result<(), BlackBoxError>;

    /// Words that map to reserved rare tokens, when the adapter has them.
    fn rare_words(&self) -> Option<Vec<String>> {
        None
    }
}

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub schema_version: u32,
    pub seq: u64,
    pub adapter: String,
    pub timestamp_ms: u128,
    pub query: SemanticQuery,
    pub response: Response,
}

/// Append-only log of interactions, optionally mirrored to a JSONL file.
#[derive(Default)]
pub struct Transcript {
    records: Vec<TranscriptRecord>,
    sink: Option<BufWriter<File>>,
    keep_in_memory: bool,
}

impl std::fmt::Debug for Transcript {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transcript").field("records", &self.records.len()).field("file", &self.sink.is_some()).finish()
    }
}

impl Transcript {
    pub fn in_memory() -> Self {
        Self { records: Vec::new(), sink: None, keep_in_memory: true }
    }

    /// Drops every record (for high-volume simulation runs).
    pub fn disabled() -> Self {
        Self { records: Vec::new(), sink: None, keep_in_memory: false }
    }

    /// Streams records to `path` (truncating it) and keeps them in memory.
    pub fn to_file(path: &Path) -> Result<Self, BlackBoxError> {
        let f = File::create(path)?;
        Ok(Self { records: Vec::new(), sink: Some(BufWriter::new(f)), keep_in_memory: true })
    }

    /// Streams to `path` without retaining records in memory.
    pub fn file_only(path: &Path) -> Result<Self, BlackBoxError> {
        let f = File::create(path)?;
        Ok(Self { records: Vec::new(), sink: Some(BufWriter::new(f)), keep_in_memory: false })
    }

    pub fn append(&mut self, rec: TranscriptRecord) -> Result<(), BlackBoxError> {
        if let Some(w) = self.sink.as_mut() {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        if self.keep_in_memory {
            self.records.push(rec);
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), BlackBoxError> {
        if let Some(w) = self.sink.as_mut() {
            w.flush()?;
        }
        Ok(())
    }

    pub fn records(&self) -> &[TranscriptRecord] {
        &self.records
    }

    pub fn load(path: &Path) -> Result<Vec<TranscriptRecord>, BlackBoxError> {
        let r = BufReader::new(File::open(path)?);
        let mut out = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: TranscriptRecord = serde_json::from_str(&line)?;
            if rec.schema_version != TRANSCRIPT_SCHEMA_VERSION {
                return Err(BlackBoxError::Config(format!(
                    "transcript line {}: unsupported schema version {}",
                    i + 1,
                    rec.schema_version
                )));
            }
            out.push(rec);
        }
        Ok(out)
    }
}

/// The only way detectors touch a model: counts queries against a budget
/// and records every interaction.
pub struct BlackBoxHandle {
    model: Box<dyn BlackBox>,
    transcript: Transcript,
    budget: Option<u64>,
    used: u64,
}

impl BlackBoxHandle {
    pub fn new(model: Box<dyn BlackBox>) -> Self {
        Self { model, transcript: Transcript::in_memory(), budget: None, used: 0 }
    }

    pub fn with_budget(mut self, budget: Option<u64>) -> Self {
        self.budget = budget;
        self
    }

    pub fn with_transcript(mut self, transcript: Transcript) -> Self {
        self.transcript = transcript;
        self
    }

    /// Queries issued so far, including invalid responses and failures.
    pub fn queries_used(&self) -> u64 {
        self.used
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn transcript_mut(&mut self) -> &mut Transcript {
        &mut self.transcript
    }

    pub fn model_id(&self) -> String {
        self.model.id()
    }

    pub fn rare_words(&self) -> Option<Vec<String>> {
        self.model.rare_words()
    }

    pub fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError> {
        if let Some(b) = self.budget {
            if self.used >= b {
                return Err(BlackBoxError::BudgetExhausted { used: self.used, budget: b });
            }
        }
        q.validate()?;
        self.used += 1;
        let start = Instant::now();
        let mut resp = self.model.ask(q)?;
        if resp.latency_ms == 0.0 {
            resp.latency_ms = start.elapsed().as_secs_f64() * 1e3;
        }
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
        self.transcript.append(TranscriptRecord {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            seq: self.used,
            adapter: self.model.id(),
            timestamp_ms: ts,
            query: q.clone(),
            response: resp.clone(),
        })?;
        Ok(resp)
    }

    pub fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
        self.model.reset_cache()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schemes::SchemeConfig;

    fn handle(budget: Option<u64>) -> BlackBoxHandle {
        let sim = Simulator::new(SimulatorConfig { watermark: SchemeConfig::None, ..Default::default() }).unwrap();
        BlackBoxHandle::new(Box::new(sim)).with_budget(budget)
    }

    fn probe() -> SemanticQuery {
        SemanticQuery::Choice(ChoiceProbe {
            prefix: "I bought".into(),
            digit: 7,
            repeat: 4,
            choices: vec!["apples".into(), "pears".into()],
            perturb: None,
        })
    }

    #[test]
    fn budget_is_enforced_and_counted() {
        let mut h = handle(Some(3));
        for _ in 0..3 {
            h.ask(&probe()).unwrap();
        }
        assert!(matches!(h.ask(&probe()), Err(BlackBoxError::BudgetExhausted { .. })));
        assert_eq!(h.queries_used(), 3);
        assert_eq!(h.transcript().records().len(), 3);
    }

    #[test]
    fn transcript_round_trips_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut h = handle(None).with_transcript(Transcript::to_file(&path).unwrap());
        for _ in 0..5 {
            h.ask(&probe()).unwrap();
        }
        h.transcript_mut().flush().unwrap();
        let loaded = Transcript::load(&path).unwrap();
        assert_eq!(loaded, h.transcript().records());
        assert_eq!(loaded.iter().map(|r| r.seq).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn invalid_queries_are_rejected() {
        let q = SemanticQuery::Choice(ChoiceProbe {
            prefix: "I bought".into(),
            digit: 7,
            repeat: 0,
            choices: vec!["apples".into()],
            perturb: None,
        });
        assert!(q.validate().is_err());
        assert!(SemanticQuery::Diversity(DiversityProbe { prompt_id: 0, target_length: 0 }).validate().is_err());
    }
}
