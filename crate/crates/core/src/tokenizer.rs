//! Word-level tokenization with reserved special tokens.
//!
//! The vocabulary defines the token space that every output softmax
//! normalizes over. Tokenization is deterministic and invertible for
//! in-vocabulary text: lowercase, split on whitespace, join with single
//! spaces on the way back.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Mask token id.
pub const MASK_ID: u32 = 0;
/// Padding token id (reserved; renderings are never padded).
pub const PAD_ID: u32 = 1;
/// Unknown-token id.
pub const UNK_ID: u32 = 2;
/// Separator token id.
pub const SEP_ID: u32 = 3;

/// The special token strings, in id order.
pub const SPECIAL_TOKENS: [&str; 4] = ["[MASK]", "[PAD]", "[UNK]", "[SEP]"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("min_count must be >= 1")]
    InvalidMinCount,
    #[error("unknown id {0}")]
    UnknownId(u32),
    #[error("malformed vocabulary file: {0}")]
    MalformedVocab(String),
}

/// Immutable token<->id mapping. Safe to share across threads once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus: the four special tokens followed by
    /// every lowercased whitespace token with count >= `min_count`, ordered by
    /// (descending count, lexicographic).
    pub fn build(corpus: &[impl AsRef<str>], min_count: usize) -> Result<Self, TokenizerError> {
        if corpus.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        if min_count < 1 {
            return Err(TokenizerError::InvalidMinCount);
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for word in normalize_words(text.as_ref()) {
                *counts.entry(word).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_count && !SPECIAL_TOKENS.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(tok, _)| tok));
        Ok(Self::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id for a (pre-lowercased) token, or `None` if out of vocabulary.
    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    /// Token string for an id.
    pub fn token(&self, id: u32) -> Result<&str, TokenizerError> {
        self.id_to_token
            .get(id as usize)
            .map(String::as_str)
            .ok_or(TokenizerError::UnknownId(id))
    }

    /// Encodes text: lowercase, split on whitespace, out-of-vocabulary words
    /// map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        normalize_words(text)
            .map(|w| self.id(&w).unwrap_or(UNK_ID))
            .collect()
    }

    /// Decodes ids back to space-joined tokens.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.token(id)?);
        }
        Ok(out)
    }

    /// Serializes as line-oriented text: one token per line, line number = id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for tok in &self.id_to_token {
            let _ = writeln!(out, "{tok}");
        }
        out
    }

    /// Parses the line-oriented form produced by [`Vocabulary::to_text`].
    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(TokenizerError::MalformedVocab(
                "fewer lines than special tokens".into(),
            ));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(TokenizerError::MalformedVocab(format!(
                    "line {i} must be {expected}, found {}",
                    tokens[i]
                )));
            }
        }
        let mut seen = HashMap::new();
        for (i, tok) in tokens.iter().enumerate() {
            if let Some(prev) = seen.insert(tok.clone(), i) {
                return Err(TokenizerError::MalformedVocab(format!(
                    "token {tok:?} appears at lines {prev} and {i}"
                )));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Lowercased whitespace words of `text`.
pub fn normalize_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(|w| w.to_lowercase())
}

/// Lowercased, single-spaced form of `text`.
pub fn normalize_text(text: &str) -> String {
    normalize_words(text).collect::<Vec<_>>().join(" ")
}
