//! Phoneme inventories and integer encoding of whitespace-separated phoneme
//! strings.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Symbol for synthetic phoneme `k`: `p00`, `p01`, ...
pub fn synthetic_symbol(k: usize) -> String {
    format!("p{k:02}")
}

/// Appended to every encoded text so attention has a place to rest once the
/// last phoneme is spoken. Being punctuation, it never counts as a phoneme.
pub const END_SYMBOL: &str = "~";

/// Punctuation tokens are embedded like phonemes but do not count towards
/// the phoneme total used for the speaking rate.
pub fn is_punctuation(symbol: &str) -> bool {
    !symbol.is_empty() && symbol.chars().all(|c| c.is_ascii_punctuation())
}

/// Ordered symbol inventory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocabulary {
    fn from(symbols: Vec<String>) -> Self {
        let index = symbols
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { symbols, index }
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}

impl Vocabulary {
    /// Sorted set of every symbol appearing in `texts`, plus [`END_SYMBOL`].
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: BTreeSet<&str> = texts.into_iter().flat_map(str::split_whitespace).collect();
        set.insert(END_SYMBOL);
        Self::from(set.into_iter().map(str::to_owned).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<PhonemeSequence> {
        let mut ids = Vec::new();
        let mut phonemes = 0;
        for tok in text.split_whitespace() {
            let id = *self
                .index
                .get(tok)
                .ok_or_else(|| Error::UnknownToken(tok.to_string()))?;
            ids.push(id);
            if !is_punctuation(tok) {
                phonemes += 1;
            }
        }
        if ids.is_empty() {
            return Err(Error::EmptyInput("phoneme text"));
        }
        let end = *self
            .index
            .get(END_SYMBOL)
            .ok_or_else(|| Error::UnknownToken(END_SYMBOL.to_string()))?;
        ids.push(end);
        Ok(PhonemeSequence {
            ids,
            phoneme_count: phonemes,
        })
    }
}

/// Integer-encoded text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<usize>,
    /// Number of non-punctuation symbols.
    pub phoneme_count: usize,
}

impl PhonemeSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Count of inventory (non-punctuation) symbols in a text.
pub fn count_phonemes(text: &str) -> usize {
    text.split_whitespace()
        .filter(|t| !is_punctuation(t))
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encode_counts_only_phonemes() {
        let v = Vocabulary::from_texts(["p01 p02 ,", "p03 ."]);
        assert_eq!(v.len(), 6);
        let s = v.encode("p01 , p03 p01 .").unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(
            s.ids.last(),
            v.symbols().iter().position(|x| x == END_SYMBOL).as_ref()
        );
        assert_eq!(s.phoneme_count, 3);
        assert_eq!(count_phonemes("p01 , p03 p01 ."), 3);
    }

    #[test]
    fn unknown_token_is_named() {
        let v = Vocabulary::from_texts(["p01 p02"]);
        match v.encode("p01 zz") {
            Err(Error::UnknownToken(t)) => assert_eq!(t, "zz"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(v.encode("   ").is_err());
    }

    #[test]
    fn serializes_as_symbol_list() {
        let v = Vocabulary::from_texts(["p02 p01"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["p01","p02","~"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(synthetic_symbol(7), "p07");
    }
}
