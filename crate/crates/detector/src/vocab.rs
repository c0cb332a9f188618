//! Token vocabulary and the `[CLS] x1 [SEP] x2 [SEP] ... xN [SEP]` layout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use incoforge_core::forge::MASK_TOKEN;
use incoforge_core::Sentence;

use crate::error::{DetectorError, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const N_SPECIAL: usize = 5;
pub const SPECIALS: [&str; N_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", MASK_TOKEN];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from corpus tokens: specials first, then tokens by
    /// descending frequency (ties alphabetical), keeping those seen at least
    /// `min_count` times, up to `max_size` entries in total.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a Sentence>, min_count: usize, max_size: Option<usize>) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in &s.tokens {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count.max(1) && !SPECIALS.contains(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let room = max_size.map_or(usize::MAX, |m| m.saturating_sub(N_SPECIAL));
        tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t.to_string()));
        Self::try_from(tokens).expect("specials are in place")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = DetectorError;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < N_SPECIAL || tokens[..N_SPECIAL].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(DetectorError::Invalid("vocabulary must start with the special symbols".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(DetectorError::Invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    pub ids: Vec<u32>,
    /// Index of the `[SEP]` following each sentence.
    pub seps: Vec<usize>,
}

pub fn token_layout_len(lengths: &[usize]) -> usize {
    lengths.iter().sum::<usize>() + lengths.len() + 1
}

pub fn build_token_input(sentences: &[Sentence], vocab: &Vocab, max_positions: usize) -> Result<TokenLayout> {
    let len = token_layout_len(&sentences.iter().map(|s| s.tokens.len()).collect::<Vec<_>>());
    if len > max_positions {
        return Err(DetectorError::SequenceTooLong { len, max: max_positions });
    }
    let mut ids = Vec::with_capacity(len);
    let mut seps = Vec::with_capacity(sentences.len());
    ids.push(CLS);
    for s in sentences {
        ids.extend(s.tokens.iter().map(|t| vocab.id(t)));
        seps.push(ids.len());
        ids.push(SEP);
    }
    Ok(TokenLayout { ids, seps })
}
