//! Text-level front-end over the simulator: queries go through
//! `render_prompt`, are parsed back from prompt text, and answers come back
//! as free text that is run through `parse_choice`. Exercises the same path
//! a remote endpoint takes.

use super::render::{parse_choice, parse_prompt, render_prompt};
use super::simulator::Simulator;
use super::{BlackBox, BlackBoxError, Response, SemanticQuery};

/// Length field sent next to a rendered prompt.
pub fn max_tokens_for(q: &SemanticQuery) -> usize {
    match q {
        SemanticQuery::Choice(_) => 32,
        SemanticQuery::Cache(c) => 2 * c.uc.len() + 16,
        SemanticQuery::Diversity(d) => d.target_length,
    }
}

#[derive(Debug)]
pub struct TextFrontend {
    inner: Simulator,
}

impl TextFrontend {
    pub fn new(inner: Simulator) -> Self {
        Self { inner }
    }

    /// Answers a raw prompt with raw text, as an endpoint would.
    pub fn complete(&mut self, prompt: &str, max_tokens: usize) -> Result<String, BlackBoxError> {
        let q = parse_prompt(prompt, max_tokens)?;
        let r = self.inner.ask(&q)?;
        let word = r.text.unwrap_or_default();
        Ok(match &q {
            SemanticQuery::Choice(c) if r.valid => {
                let digits: Vec<String> =
                    c.perturb.iter().map(|d| d.to_string()).chain(std::iter::repeat_n(c.digit.to_string(), c.repeat)).collect();
                format!("{} {} {}.", c.prefix, digits.join(" "), word)
            }
            _ => word,
        })
    }
}

impl BlackBox for TextFrontend {
    fn id(&self) -> String {
        format!("text+{}", self.inner.id())
    }

    fn ask(&mut self, q: &SemanticQuery) -> Result<Response, BlackBoxError> {
        let text = self.complete(&render_prompt(q), max_tokens_for(q))?;
        Ok(text_response(q, text, 0.0))
    }

    fn reset_cache(&mut self) -> Result<(), BlackBoxError> {
        self.inner.reset_cache()
    }

    fn rare_words(&self) -> Option<Vec<String>> {
        None
    }
}

/// Builds a [`Response`] from completion text for any text adapter.
pub fn text_response(q: &SemanticQuery, text: String, latency_ms: f64) -> Response {
    let words = text.split_whitespace().count();
    let (parsed_choice, valid) = match q {
        SemanticQuery::Choice(c) => {
            let p = parse_choice(&text, &c.choices);
            (p, p.is_some())
        }
        SemanticQuery::Cache(c) => {
            let p = parse_choice(&text, &c.choices);
            (p, p.is_some())
        }
        SemanticQuery::Diversity(d) => (None, words >= d.target_length),
    };
    Response { text: Some(text), tokens: None, parsed_choice, valid, latency_ms, token_count: words }
}
