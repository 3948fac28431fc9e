//! Generic HTTP chat-endpoint adapter.
//!
//! One declarative provider file describes the endpoint, the auth header
//! (value read from an environment variable), a JSON body template with
//! `{{prompt}}` and `{{max_tokens}}` placeholders, a JSON pointer to the
//! completion text, and rate-limit / retry / cache-wait settings.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::render::render_prompt;
use super::text::{max_tokens_for, text_response};
use super::{BlackBox, BlackBoxError, Response, SemanticQuery};

fn default_name() -> String {
    "http".into()
}
fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}
fn default_rate() -> f64 {
    1.0
}
fn default_burst() -> f64 {
    1.0
}
fn default_retries() -> u32 {
    5
}
fn default_backoff_initial() -> u64 {
    500
}
fn default_backoff_max() -> u64 {
    30_000
}
fn default_timeout() -> u64 {
    60
}
fn default_cache_wait() -> f64 {
    1000.0
}
fn default_token_factor() -> f64 {
    2.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpProviderConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub endpoint: String,
    /// Environment variable holding the credential. No auth header if unset.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    /// JSON body with `{{prompt}}` (inside a string literal) and `{{max_tokens}}`.
    pub body_template: String,
    /// JSON pointer to the completion text, e.g. "/choices/0/message/content".
    pub response_pointer: String,
    #[serde(default = "default_rate")]
    pub rate_limit_per_sec: f64,
    #[serde(default = "default_burst")]
    pub burst: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_initial")]
    pub backoff_initial_ms: u64,
    #[serde(default = "default_backoff_max")]
    pub backoff_max_ms: u64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    /// Wall-clock wait that empties the provider-side context cache.
    #[serde(default = "default_cache_wait")]
    pub cache_reset_wait_secs: f64,
    /// Requested max tokens per target word for diversity probes.
    #[serde(default = "default_token_factor")]
    pub diversity_token_factor: f64,
}

impl HttpProviderConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, BlackBoxError> {
        let c: Self = toml::from_str(s).map_err(|e| BlackBoxError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, BlackBoxError> {
        let s = std::fs::read_to_string(path)?;
        Self::from_toml_str(&s).map_err(|e| BlackBoxError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), BlackBoxError> {
        let bad = |m: String| Err(BlackBoxError::Config(m));
        if !self.body_template.contains("{{prompt}}") {
            return bad("body_template lacks {{prompt}}".into());
        }
        if !(self.rate_limit_per_sec > 0.0) || !(self.burst >= 1.0) {
            return bad("rate_limit_per_sec must be positive and burst at least 1".into());
        }
        if !self.response_pointer.is_empty() && !self.response_pointer.starts_with('/') {
            return bad(format!("response_pointer '{}' is not a JSON pointer", self.response_pointer));
        }
        if !(self.cache_reset_wait_secs >= 0.0) || !(self.diversity_token_factor > 0.0) {
            return bad("cache_reset_wait_secs and diversity_token_factor must be non-negative / positive".into());
        }
        fill_template(&self.body_template, "probe", 1).map(|_| ())
    }
}

/// Substitutes the placeholders and checks that the result is JSON.
pub fn fill_template(template: &str, prompt: &str, max_tokens: usize) -> Result<String, BlackBoxError> {
    let escaped = serde_json::to_string(prompt)?;
    let body = template.replace("{{prompt}}", &escaped[1..escaped.len() - 1]).replace("{{max_tokens}}", &max_tokens.to_string());
    serde_json::from_str::<serde_json::Value>(&body)
        .map_err(|e| BlackBoxError::Config(format!("body_template does not produce valid JSON: {e}")))?;
    Ok(body)
}

/// Time source for waits, replaceable in tests.
pub trait Sleeper: Send {
    fn sleep(&mut self, d: Duration);
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&mut self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested waits without sleeping.
#[derive(Clone, Debug, Default)]
pub struct RecordingSleeper(pub Arc<Mutex<Vec<Duration>>>);

impl RecordingSleeper {
    pub fn total(&self) -> Duration {
        self.0.lock().expect("sleeper lock").iter().sum()
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&mut self, d: Duration) {
        self.0.lock().expect("sleeper lock").push(d);
    }
}

#[derive(Debug)]
struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    fn new(rate: f64, capacity: f64) -> Self {
        Self { rate, capacity, tokens: capacity, last: Instant::now() }
    }

    fn acquire(&mut self, sleeper: &mut dyn Sleeper) {
        let now = Instant::now();
        self.tokens = (self.tokens + now.duration_since(self.last).as_secs_f64() * self.rate).min(self.capacity);
        self.last = now;
        if self.tokens < 1.0 {
            let wait = (1.0 - self.tokens) / self.rate;
            sleeper.sleep(Duration::from_secs_f64(wait));
            self.tokens = 1.0;
            self.last = Instant::now();
        }
        self.tokens -= 1.0;
    }
}

pub struct HttpModel {
    config: HttpProviderConfig,
    client: reqwest::blocking::Client,
    auth: Option<String>,
    bucket: TokenBucket,
    sleeper: Box<dyn Sleeper>,
}

impl std::fmt::Debug for HttpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpModel").field("config", &self.config).field("auth", &self.auth.as_ref().map(|_| "<redacted>")).finish()
    }
}

enum Attempt {
    Done(Option<String>),
    Retry(String),
}

impl HttpModel {
    pub fn new(config: HttpProviderConfig) -> Result<Self, BlackBoxError> {
        Self::with_sleeper(config, Box::new(ThreadSleeper))
    }

    pub fn with_sleeper(config: HttpProviderConfig, sleeper: Box<dyn Sleeper>) -> Result<Self, BlackBoxError> {
        config.validate()?;
        let auth = match &config.auth_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BlackBoxError::Config(format!("environment variable {var} (named by auth_env) is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BlackBoxError::Config(e.to_string()))?;
        let bucket = TokenBucket::new(config.rate_limit_per_sec, config.burst);
        Ok(Self { config, client, auth, bucket, sleeper })
    }

    fn max_tokens(&self, q: &SemanticQuery) -> usize {
        match q {
            SemanticQuery::Diversity(d) => (d.target_length as f64 * self.config.diversity_token_factor).ceil() as usize,
            _ => max_tokens_for(q),
        }
    }

    fn attempt(&mut self, body: &str) -> Result<Attempt, BlackBoxError> {
        self.bucket.acquire(self.sleeper.as_mut());
        let mut req = self.client.post(&self.config.endpoint).header("Content-Type", "application/json").body(body.to_string());
        if let Some(a) = &self.auth {
            req = req.header(self.config.auth_header.as_str(), format!("{}{}", self.config.auth_prefix, a));
        }
        let resp = match req.send() {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(e.to_string())),
        };
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        if status.as_u16() == 429 || status.is_server_error() {
            return Ok(Attempt::Retry(format!("HTTP {status}: {}", truncate(&text))));
        }
        if !status.is_success() {
            return Err(BlackBoxError::Transport { retryable: false, message: format!("HTTP {status}: {}", truncate(&text)) });
        }
        let extracted = serde_json::from_str::<serde_json::Value>(&text)
            .ok()
            .and_then(|v| v.pointer(&self.config.response_pointer).and_then(|x| x.as_str()).map(str::to_string));
        Ok(Attempt::Done(extracted))
    }

    /// Sends one rendered prompt, retrying transport failures with
    /// exponential backoff. Returns the extracted completion, if present.
    pub fn complete(&mut self, prompt: &str, max_tokens: usize) -> Result<Option<String>, BlackBoxError> {
        let body = fill_template(&self.config.body_template, prompt, max_tokens)?;
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            match self.attempt(&body)? {
                Attempt::Done(extracted) => return Ok(extracted),
                Attempt::Retry(msg) => {
                    last = msg;
                    if attempt < self.config.max_retries {
                        let ms = self.config.backoff_initial_ms.saturating_mul(1u64 << attempt.min(30)).min(self.config.backoff_max_ms);
                        self.sleeper.sleep(Duration::from_millis(ms));
                    }
                }
            }
        }
        Err(BlackBoxError::Transport {
            retryable: true,
            message: format!("gave up after {} attempts: {last}", self.config.max_retries + 1),
        })
    }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(200) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

impl BlackBox for HttpModel {
    fn id(&self) -> String {
        format!("http:{}", self.config.name)
    }

    fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError> {
        let start = Instant::now();
        let out = self.complete(&render_prompt(q), self.max_tokens(q))?;
        let latency = start.elapsed().as_secs_f64() * 1e3;
        Ok(match out {
            Some(text) => {
                let text = match q {
                    SemanticQuery::Diversity(d) => {
                        let w: Vec<&str> = text.split_whitespace().collect();
                        if w.len() >= d.target_length { w[..d.target_length].join(" ") } else { text }
                    }
                    _ => text,
                };
                text_response(q, text, latency)
            }
            None => Response { text: None, tokens: None, parsed_choice: None, valid: false, latency_ms: latency, token_count: 0 },
        })
    }

    fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
        self.sleeper.sleep(Duration::from_secs_f64(self.config.cache_reset_wait_secs));
        Ok(())
    }
}
