use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const END: usize = 2;
pub const UNK: usize = 3;

const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// How an out-of-vocabulary word is rendered in generated captions.
pub const UNK_TEXT: &str = "<unk>";

/// Whitespace tokenization of pre-tokenized, lowercase text.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    min_count: usize,
    tokens: Vec<String>,
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            min_count: v.min_count,
            tokens: v.tokens,
        }
    }
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_tokens(r.tokens, r.min_count)
    }
}

/// Builds a vocabulary from tokenized captions. Words seen fewer than
/// `min_count` times are left out and map to UNK.
///
/// Indices: the four specials, then words by descending frequency with
/// ties broken lexicographically.
pub fn build_vocabulary<S: AsRef<str>>(captions: &[Vec<S>], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if captions.iter().all(|c| c.is_empty()) {
        return Err(Error::Empty("vocabulary corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for caption in captions {
        for w in caption {
            *counts.entry(w.as_ref()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count && !SPECIALS.contains(w))
        .collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(kept.into_iter().map(|(w, _)| w.to_string()))
        .collect();
    Vocabulary::from_tokens(tokens, min_count)
}

impl Vocabulary {
    /// Restores a vocabulary from its index-ordered token list.
    pub fn from_tokens(tokens: Vec<String>, min_count: usize) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Config("vocabulary must start with the special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Self {
            tokens,
            index,
            min_count,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    /// Word indices for a whitespace-tokenized caption.
    pub fn encode(&self, caption: &str) -> Vec<usize> {
        tokenize(caption).into_iter().map(|w| self.index_of(w)).collect()
    }

    /// Joins word indices into text. PAD, START and END are dropped, UNK is
    /// rendered as [`UNK_TEXT`].
    pub fn decode(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .filter(|&&i| !matches!(i, PAD | START | END))
            .map(|&i| {
                if i == UNK {
                    UNK_TEXT
                } else {
                    self.token(i).unwrap_or(UNK_TEXT)
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}
