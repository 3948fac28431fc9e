//! Word ↔ token mapping used by the simulator.
//!
//! Layout for a vocabulary of size V ≥ 256:
//! digits at 0..10, fruit names at 10..42, prefix words at 42..72,
//! instruction words at 72..112, hashed unknown words in [128, 3V/4),
//! and rare tokens in [3V/4, V), each spelled as a unique 5-letter word.

use std::collections::HashMap;

use crate::corelm::TokenId;
use crate::rng::{mix, splitmix64};

pub const MIN_VOCAB: usize = 256;

pub const FRUITS: [&str; 32] = [
    "apples", "bananas", "cherries", "grapes", "pears", "plums", "peaches", "mangoes", "lemons", "limes", "oranges",
    "kiwis", "melons", "berries", "apricots", "figs", "dates", "guavas", "papayas", "lychees", "coconuts", "olives",
    "quinces", "currants", "raisins", "tangerines", "nectarines", "pineapples", "pomegranates", "strawberries",
    "blueberries", "raspberries",
];

/// Words that open a sentence prefix t1.
pub const PREFIX_WORDS: [&str; 30] = [
    "i", "we", "you", "they", "she", "he", "my", "our", "friend", "mother", "bought", "picked", "ate", "saw", "sold",
    "wanted", "found", "carried", "washed", "cooked", "grew", "painted", "counted", "shared", "dropped", "peeled",
    "packed", "stole", "liked", "ordered",
];

/// Words of the fixed instruction templates.
pub const INSTRUCTION_WORDS: [&str; 40] = [
    "complete", "the", "sentence", "using", "a", "random", "word", "from", "for", "example", "that", "uses",
    "different", "words", "to", "not", "bias", "model", "pick", "fruit", "between", "and", "use", "following",
    "format", "this", "is", "story", "of", "once", "upon", "time", "there", "was", "here", "tale", "about", "roses",
    "tulips", "answer",
];

const FRUIT_BASE: TokenId = 10;
const PREFIX_BASE: TokenId = 42;
const INSTR_BASE: TokenId = 72;
const UNKNOWN_BASE: usize = 128;

const RARE_MUL: u64 = 7919;
const RARE_ADD: u64 = 12_345;
const RARE_SPACE: u64 = 26 * 26 * 26 * 26 * 26;

#[derive(Clone, Debug)]
pub struct Vocab {
    size: usize,
    reserved: HashMap<String, TokenId>,
    names: HashMap<TokenId, String>,
    rare_inv_mul: u64,
}

fn inv_mod(a: u64, m: u64) -> u64 {
    let (mut t, mut new_t) = (0i128, 1i128);
    let (mut r, mut new_r) = (m as i128, a as i128);
    while new_r != 0 {
        let q = r / new_r;
        (t, new_t) = (new_t, t - q * new_t);
        (r, new_r) = (new_r, r - q * new_r);
    }
    (if t < 0 { t + m as i128 } else { t }) as u64
}

fn spell(mut code: u64) -> String {
    let mut b = [b'a'; 5];
    for c in b.iter_mut().rev() {
        *c = b'a' + (code % 26) as u8;
        code /= 26;
    }
    String::from_utf8(b.to_vec()).expect("ascii")
}

fn unspell(w: &str) -> Option<u64> {
    if w.len() != 5 || !w.bytes().all(|c| c.is_ascii_lowercase()) {
        return None;
    }
    Some(w.bytes().fold(0u64, |acc, c| acc * 26 + (c - b'a') as u64))
}

/// Lowercases and strips surrounding punctuation.
pub fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self, String> {
        if size < MIN_VOCAB {
            return Err(format!("simulator vocabulary must have at least {MIN_VOCAB} tokens, got {size}"));
        }
        let mut reserved = HashMap::new();
        for d in 0..10u32 {
            reserved.insert(d.to_string(), d);
        }
        for (i, w) in FRUITS.iter().enumerate() {
            reserved.insert(w.to_string(), FRUIT_BASE + i as TokenId);
        }
        for (i, w) in PREFIX_WORDS.iter().enumerate() {
            reserved.insert(w.to_string(), PREFIX_BASE + i as TokenId);
        }
        for (i, w) in INSTRUCTION_WORDS.iter().enumerate() {
            reserved.insert(w.to_string(), INSTR_BASE + i as TokenId);
        }
        let names = reserved.iter().map(|(w, &t)| (t, w.clone())).collect();
        Ok(Self { size, reserved, names, rare_inv_mul: inv_mod(RARE_MUL, RARE_SPACE) })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn rare_range(&self) -> std::ops::Range<usize> {
        3 * self.size / 4..self.size
    }

    fn rare_word(&self, id: TokenId) -> String {
        spell((id as u64 * RARE_MUL + RARE_ADD) % RARE_SPACE)
    }

    fn rare_id(&self, w: &str) -> Option<TokenId> {
        let code = unspell(w)?;
        let id = ((code + RARE_SPACE - RARE_ADD % RARE_SPACE) % RARE_SPACE) as u128 * self.rare_inv_mul as u128
            % RARE_SPACE as u128;
        let id = id as usize;
        self.rare_range().contains(&id).then_some(id as TokenId)
    }

    /// Token for one word. Unknown words hash into the unknown range.
    pub fn token(&self, word: &str) -> TokenId {
        let w = normalize_word(word);
        if let Some(&t) = self.reserved.get(&w) {
            return t;
        }
        if let Some(t) = self.rare_id(&w) {
            return t;
        }
        let h = w.bytes().fold(splitmix64(0x776f_7264), |h, b| mix(h, b as u64));
        let span = (self.rare_range().start - UNKNOWN_BASE) as u64;
        (UNKNOWN_BASE as u64 + h % span) as TokenId
    }

    pub fn tokens(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().filter(|w| !normalize_word(w).is_empty()).map(|w| self.token(w)).collect()
    }

    /// Surface form of a token.
    pub fn word(&self, t: TokenId) -> String {
        if let Some(w) = self.names.get(&t) {
            return w.clone();
        }
        if self.rare_range().contains(&(t as usize)) {
            return self.rare_word(t);
        }
        format!("w{t}")
    }

    /// All rare-token words, excluding any that collide with a reserved word.
    pub fn rare_words(&self) -> Vec<String> {
        self.rare_range()
            .map(|t| self.rare_word(t as TokenId))
            .filter(|w| !self.reserved.contains_key(w))
            .collect()
    }

    pub fn is_rare(&self, t: TokenId) -> bool {
        self.rare_range().contains(&(t as usize))
    }
}
