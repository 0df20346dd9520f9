//! Word-level tokenizer and vocabulary.
//!
//! Text is lowercased and split on whitespace; every punctuation character
//! becomes a token of its own. Ids 0..4 are reserved for `[PAD]`, `[UNK]`,
//! `[CLS]` and `[SEP]`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary max_size must be at least 5, got {0}")]
    MaxSizeTooSmall(usize),
    #[error("max_len must be at least 2, got {0}")]
    MaxLenTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: u32, size: usize },
    #[error("duplicate token {token:?} in vocabulary file at line {line}")]
    DuplicateToken { token: String, line: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const N_RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; N_RESERVED] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

/// Default sequence length for the encoder.
pub const DEFAULT_MAX_LEN: usize = 64;

/// English stop words, used by the TF-IDF path when stop-word removal is on.
pub const STOP_WORDS: &[&str] = &[
    "a", "about", "above", "after", "again", "against", "all", "am", "an", "and", "any", "are",
    "as", "at", "be", "because", "been", "before", "being", "below", "between", "both", "but",
    "by", "can", "could", "did", "do", "does", "doing", "down", "during", "each", "few", "for",
    "from", "further", "had", "has", "have", "having", "he", "her", "here", "hers", "herself",
    "him", "himself", "his", "how", "i", "if", "in", "into", "is", "it", "its", "itself", "just",
    "me", "more", "most", "my", "myself", "no", "nor", "not", "now", "of", "off", "on", "once",
    "only", "or", "other", "our", "ours", "ourselves", "out", "over", "own", "same", "she",
    "should", "so", "some", "such", "than", "that", "the", "their", "theirs", "them",
    "themselves", "then", "there", "these", "they", "this", "those", "through", "to", "too",
    "under", "until", "up", "very", "was", "we", "were", "what", "when", "where", "which",
    "while", "who", "whom", "why", "will", "with", "would", "you", "your", "yours", "yourself",
    "yourselves",
];

pub fn is_stop_word(token: &str) -> bool {
    STOP_WORDS.binary_search(&token).is_ok()
}

fn is_punct(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace()
}

/// Lowercase and split into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punct(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_lowercase().collect());
        } else {
            current.extend(c.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// [`tokenize`], optionally dropping stop words and punctuation-only tokens.
pub fn tokenize_filtered(text: &str, remove_stop_words: bool) -> Vec<String> {
    let tokens = tokenize(text);
    if !remove_stop_words {
        return tokens;
    }
    tokens
        .into_iter()
        .filter(|t| !is_stop_word(t) && !t.chars().all(is_punct))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_tokens(Vec::<String>::new()).expect("empty token list is valid")
    }
}

impl Vocabulary {
    /// Vocabulary with the reserved ids followed by `tokens` in order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for (line, tok) in tokens.into_iter().enumerate() {
            let tok = tok.into();
            if index.contains_key(&tok) {
                return Err(TokenizerError::DuplicateToken {
                    token: tok,
                    line: line + 1,
                });
            }
            index.insert(tok.clone(), all.len() as u32);
            all.push(tok);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == N_RESERVED
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[N_RESERVED..]
    }

    /// One token per line; the line number is `id - 4`.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut out = String::new();
        for t in self.words() {
            out.push_str(t);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        Vocabulary::from_tokens(text.lines().map(str::to_string))
    }
}

/// Build a vocabulary from raw texts.
///
/// Tokens below `min_freq` are dropped, the rest ranked by frequency
/// (descending) then token (ascending) and cut to `max_size - 4` entries.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    max_size: usize,
    min_freq: usize,
) -> Result<Vocabulary, TokenizerError> {
    if max_size < N_RESERVED + 1 {
        return Err(TokenizerError::MaxSizeTooSmall(max_size));
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for text in corpus {
        for tok in tokenize(text.as_ref()) {
            *freq.entry(tok).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> =
        freq.into_iter().filter(|(_, f)| *f >= min_freq).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - N_RESERVED);
    Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

/// Fixed-length id sequence. Positions `< true_length` are real tokens
/// (mask 1), the rest are `[PAD]` (mask 0).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }
}

/// `[CLS]` followed by the token ids, truncated and padded to `max_len`.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, TokenizerError> {
    if max_len < 2 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len - 1)
            .map(|t| vocab.id(t).unwrap_or(UNK)),
    );
    let true_length = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| u8::from(i < true_length)).collect();
    Ok(TokenSequence {
        ids,
        mask,
        true_length,
    })
}

/// Space-joined tokens with reserved ids skipped.
pub fn decode(seq: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut words = Vec::new();
    for &id in &seq.ids {
        let tok = vocab.token(id).ok_or(TokenizerError::IdOutOfRange {
            id,
            size: vocab.len(),
        })?;
        if (id as usize) >= N_RESERVED {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
