use std::collections::HashMap;

use crate::error::{Error, Result};

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;

pub const NAMES: [&str; 16] = [
    "ada", "bo", "cy", "dax", "eve", "fin", "gus", "hal", "ivy", "jo", "kai", "lux", "max", "nia", "oz", "pia",
];
pub const POSITIVE_WORDS: [&str; 6] = ["happy", "joyful", "cheerful", "calm", "proud", "bright"];
pub const NEGATIVE_WORDS: [&str; 6] = ["sad", "angry", "gloomy", "tense", "upset", "grim"];
pub const PLACES: [&str; 8] = ["park", "beach", "market", "office", "station", "garden", "harbor", "museum"];
pub const FILLER: [&str; 3] = ["looks", "at", "the"];

/// Closed toy vocabulary. Ids are dense; `[CLS]` and `[PAD]` are reserved.
#[derive(Clone, Debug)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TokenVocab {
    pub fn glyph_world() -> Self {
        let tokens: Vec<String> = ["[CLS]", "[PAD]"]
            .into_iter()
            .chain(FILLER)
            .chain(NAMES)
            .chain(POSITIVE_WORDS)
            .chain(NEGATIVE_WORDS)
            .chain(PLACES)
            .map(String::from)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a content token; the reserved markers are not content.
    pub fn id(&self, token: &str) -> Result<usize> {
        match self.index.get(token) {
            Some(&id) if id != CLS_ID && id != PAD_ID => Ok(id),
            _ => Err(Error::UnknownToken(token.to_string())),
        }
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Fixed-length encoding: content ids padded with `[PAD]` (or truncated) to
    /// `max_len`, plus a mask marking real tokens. `[CLS]` is not included.
    pub fn tokenize<S: AsRef<str>>(&self, text: &[S], max_len: usize) -> Result<TokenizedText> {
        let mut ids = Vec::with_capacity(max_len);
        for t in text.iter().take(max_len) {
            ids.push(self.id(t.as_ref())?);
        }
        let real = ids.len();
        ids.resize(max_len, PAD_ID);
        let mask = (0..max_len).map(|i| i < real).collect();
        Ok(TokenizedText { ids, mask })
    }

    pub fn detokenize(&self, text: &TokenizedText) -> Vec<String> {
        text.ids
            .iter()
            .zip(&text.mask)
            .filter(|(_, &m)| m)
            .filter_map(|(&id, _)| self.token(id).map(String::from))
            .collect()
    }

    pub fn name_index(&self, id: usize) -> Option<usize> {
        self.token(id).and_then(|t| NAMES.iter().position(|n| *n == t))
    }

    /// `Some(true)` for positive sentiment words, `Some(false)` for negative ones.
    pub fn polarity(&self, id: usize) -> Option<bool> {
        let t = self.token(id)?;
        if POSITIVE_WORDS.contains(&t) {
            Some(true)
        } else if NEGATIVE_WORDS.contains(&t) {
            Some(false)
        } else {
            None
        }
    }
}

/// Content token ids and their validity mask, both of length `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenizedText {
    /// `[CLS]` followed by the content ids, and the matching key mask.
    pub fn with_cls(&self) -> (Vec<usize>, Vec<bool>) {
        let ids = std::iter::once(CLS_ID).chain(self.ids.iter().copied()).collect();
        let mask = std::iter::once(true).chain(self.mask.iter().copied()).collect();
        (ids, mask)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
