//! Character vocabulary with reserved CTC blank and padding ids.

use std::collections::{BTreeSet, HashMap};

use unicode_normalization::UnicodeNormalization;

use crate::error::{HtrError, Result};

pub const BLANK_ID: usize = 0;
pub const PAD_ID: usize = 1;
/// Id of the first real character.
pub const FIRST_CHAR_ID: usize = 2;

/// Bijective character ↔ id table. Ids 0 and 1 are the blank and pad symbols;
/// characters follow in their stored order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

/// Canonical (NFC) form used for every transcript entering the system.
pub fn canonical(text: &str) -> String {
    text.nfc().collect()
}

impl CharVocab {
    /// Builds the sorted character set of a corpus.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        let set: BTreeSet<char> = corpus
            .iter()
            .flat_map(|t| canonical(t.as_ref()).chars().collect::<Vec<_>>())
            .collect();
        if set.is_empty() {
            return Err(HtrError::Data(
                "corpus contains no characters to build a vocabulary from".into(),
            ));
        }
        Self::from_chars(set.into_iter().collect())
    }

    /// Uses `chars` in the given order. Duplicates are rejected.
    pub fn from_chars(chars: Vec<char>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(chars.len());
        for (i, &c) in chars.iter().enumerate() {
            if ids.insert(c, FIRST_CHAR_ID + i).is_some() {
                return Err(HtrError::Data(format!("duplicate vocabulary character {c:?}")));
            }
        }
        if chars.is_empty() {
            return Err(HtrError::Data("vocabulary has no characters".into()));
        }
        Ok(Self { chars, ids })
    }

    /// Parses the string form produced by [`CharVocab::symbols`].
    pub fn from_symbols(symbols: &str) -> Result<Self> {
        Self::from_chars(symbols.chars().collect())
    }

    /// All characters concatenated in id order.
    pub fn symbols(&self) -> String {
        self.chars.iter().collect()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    /// Number of output classes, including blank and pad.
    pub fn size(&self) -> usize {
        self.chars.len() + FIRST_CHAR_ID
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.ids.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        id.checked_sub(FIRST_CHAR_ID).and_then(|i| self.chars.get(i).copied())
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        canonical(text)
            .chars()
            .map(|c| self.id(c).ok_or(HtrError::OutOfVocabulary(c)))
            .collect()
    }

    /// Maps ids back to text, skipping blank and pad.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .filter(|&&id| id >= FIRST_CHAR_ID)
            .map(|&id| {
                self.char_of(id)
                    .ok_or_else(|| HtrError::Data(format!("id {id} outside the vocabulary")))
            })
            .collect()
    }
}
