//! Prompt rendering, prompt parsing for the text front-end, and choice
//! extraction from free-form completions.

use super::vocab::normalize_word;
use super::{BlackBoxError, CacheProbe, ChoiceProbe, DiversityProbe, SemanticQuery};

pub const STORY_PROMPTS: [&str; 3] = ["This is the story of", "Once upon a time there was", "Here is a tale about"];

const CHOICE_HEAD: &str = "Complete the sentence \"";
const CHOICE_LIST: &str = "\" using a random word from: [";
const CHOICE_TAIL: &str = "]. Here is an example that uses different words to not bias the model: \"";
const CACHE_HEAD: &str = "Pick a fruit between: ";
const CACHE_FORMAT: &str = ". Use the following format: ";

fn digit_run(c: &ChoiceProbe) -> Vec<String> {
    c.perturb.iter().map(|d| d.to_string()).chain(std::iter::repeat_n(c.digit.to_string(), c.repeat)).collect()
}

/// Natural-language prompt for a query. Deterministic in the query.
pub fn render_prompt(q: &SemanticQuery) -> String {
    match q {
        SemanticQuery::Choice(c) => {
            let example_digit = (c.digit + 5) % 10;
            let example = std::iter::repeat_n(example_digit.to_string(), c.repeat.max(1)).collect::<Vec<_>>().join(" ");
            format!(
                "{CHOICE_HEAD}{} {}{CHOICE_LIST}{}{CHOICE_TAIL}She painted {example} roses.\"",
                c.prefix.trim(),
                digit_run(c).join(" "),
                c.choices.join(", "),
            )
        }
        SemanticQuery::Cache(c) => {
            let uc = c.uc.join(" ");
            format!("{uc}\n{CACHE_HEAD}{} and {}{CACHE_FORMAT}{uc} {}", c.choices[0], c.choices[1], c.example)
        }
        SemanticQuery::Diversity(d) => STORY_PROMPTS[d.prompt_id % STORY_PROMPTS.len()].to_string(),
    }
}

fn bad(msg: &str) -> BlackBoxError {
    BlackBoxError::InvalidQuery(format!("unrecognised prompt: {msg}"))
}

/// Inverse of [`render_prompt`] up to token-stream equivalence. Used by the
/// text-level simulator front-end. `max_tokens` stands in for the length
/// field that remote endpoints receive next to the prompt.
pub fn parse_prompt(text: &str, max_tokens: usize) -> Result<SemanticQuery, BlackBoxError> {
    if let Some(rest) = text.strip_prefix(CHOICE_HEAD) {
        let (sentence, rest) = rest.split_once(CHOICE_LIST).ok_or_else(|| bad("missing choice list"))?;
        let (list, _) = rest.split_once(CHOICE_TAIL).ok_or_else(|| bad("missing example clause"))?;
        let words: Vec<&str> = sentence.split_whitespace().collect();
        let is_digit = |w: &str| w.len() == 1 && w.as_bytes()[0].is_ascii_digit();
        let run_start = words.iter().rposition(|w| !is_digit(w)).map_or(0, |i| i + 1);
        let run: Vec<u8> = words[run_start..].iter().map(|w| w.as_bytes()[0] - b'0').collect();
        let digit = *run.last().ok_or_else(|| bad("sentence has no digit"))?;
        let repeat = run.iter().rev().take_while(|&&d| d == digit).count();
        let perturb = match run.len() - repeat {
            0 => None,
            1 => Some(run[0]),
            _ => return Err(bad("more than one perturbation digit")),
        };
        let prefix = words[..run_start].join(" ");
        let choices = list.split(", ").map(str::to_string).collect();
        return Ok(SemanticQuery::Choice(ChoiceProbe { prefix, digit, repeat, choices, perturb }));
    }
    if let Some((uc, rest)) = text.split_once('\n') {
        let rest = rest.strip_prefix(CACHE_HEAD).ok_or_else(|| bad("missing cache instruction"))?;
        let (pair, format) = rest.split_once(CACHE_FORMAT).ok_or_else(|| bad("missing format clause"))?;
        let (f1, f2) = pair.split_once(" and ").ok_or_else(|| bad("missing fruit pair"))?;
        let example = format.split_whitespace().last().ok_or_else(|| bad("missing example"))?;
        return Ok(SemanticQuery::Cache(CacheProbe {
            uc: uc.split_whitespace().map(str::to_string).collect(),
            choices: [f1.to_string(), f2.to_string()],
            example: example.to_string(),
        }));
    }
    if let Some(id) = STORY_PROMPTS.iter().position(|p| *p == text.trim()) {
        return Ok(SemanticQuery::Diversity(DiversityProbe { prompt_id: id, target_length: max_tokens }));
    }
    Err(bad("no template matches"))
}

fn words_of(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c == ',' || c == ';' || c == '"')
        .map(normalize_word)
        .filter(|w| !w.is_empty())
        .collect()
}

/// Index of the unique choice mentioned in `text`. None when no choice or
/// two different choices appear.
pub fn parse_choice(text: &str, choices: &[String]) -> Option<usize> {
    let words = words_of(text);
    let mut found = None;
    for (i, c) in choices.iter().enumerate() {
        let cw = words_of(c);
        if cw.is_empty() || cw.len() > words.len() {
            continue;
        }
        if words.windows(cw.len()).any(|w| w == cw.as_slice()) {
            if found.is_some() {
                return None;
            }
            found = Some(i);
        }
    }
    found
}
