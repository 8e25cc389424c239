// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tablegen::EntityPool;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const PIPE: TokenId = 1;
pub const COMMA: TokenId = 2;
pub const NEWLINE: TokenId = 3;
pub const DASH_RUN: TokenId = 4;
pub const TR_OPEN: TokenId = 5;
pub const TR_CLOSE: TokenId = 6;
pub const TD_OPEN: TokenId = 7;
pub const TD_CLOSE: TokenId = 8;
pub const TH_OPEN: TokenId = 9;
pub const TH_CLOSE: TokenId = 10;
pub const FILLER: TokenId = 11;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 12] = [
    "<bos>", "|", ",", "\n", "---", "<tr>", "</tr>", "<td>", "</td>", "<th>", "</th>", "~",
];

/// Words used by question templates.
pub const TEMPLATE_WORDS: [&str; 14] = [
    "Q:", "A:", "what", "is", "the", "for", "according", "to", "table", "value", "of", "find",
    "?", ".",
];

/// Closed word-level vocabulary. Reserved ids come first, then template
/// words, then every pool word in pool order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn build(pool: &EntityPool) -> Result<Self> {
        let words = RESERVED
            .iter()
            .chain(TEMPLATE_WORDS.iter())
            .copied()
            .chain(pool.words())
            .map(str::to_string)
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || (w.contains(char::is_whitespace) && w != "\n") {
                return Err(LabError::Prompt(format!("`{w:?}` is not a single word")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(LabError::Prompt(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index
            .get(word)
            .copied()
            .ok_or_else(|| LabError::UnknownToken(word.to_string()))
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Splits on spaces; a newline is a token of its own.
    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut out = Vec::new();
        for (i, line) in text.split('\n').enumerate() {
            if i > 0 {
                out.push(NEWLINE);
            }
            for w in line.split(' ').filter(|w| !w.is_empty()) {
                out.push(self.id(w)?);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Vocab::tokenize`]: words joined by single spaces, no
    /// spaces around newlines.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut s = String::new();
        let mut prev_newline = true;
        for &id in ids {
            if id == NEWLINE {
                s.push('\n');
                prev_newline = true;
            } else {
                if !prev_newline {
                    s.push(' ');
                }
                s.push_str(self.word(id));
                prev_newline = false;
            }
        }
        s
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_words(self.words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tablegen::build_entity_pool;

    #[test]
    fn reserved_ids_match_surface_table() {
        let v = Vocab::build(&build_entity_pool(1, 4, 8).unwrap()).unwrap();
        assert_eq!(v.id("|").unwrap(), PIPE);
        assert_eq!(v.id("\n").unwrap(), NEWLINE);
        assert_eq!(v.id("~").unwrap(), FILLER);
        assert_eq!(v.id("</th>").unwrap(), TH_CLOSE);
    }

    #[test]
    fn size_counts_pool_and_reserved() {
        let pool = build_entity_pool(1, 10, 10).unwrap();
        let v = Vocab::build(&pool).unwrap();
        assert!(v.len() >= 100 + RESERVED.len());
        assert_eq!(v.len(), RESERVED.len() + TEMPLATE_WORDS.len() + 3 + 10 * 11);
    }

    #[test]
    fn ids_and_words_are_a_bijection() {
        let v = Vocab::build(&build_entity_pool(1, 10, 10).unwrap()).unwrap();
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.word(id)).unwrap(), id);
        }
    }

    #[test]
    fn duplicates_are_rejected() {
        let words = vec!["a".to_string(), "|".to_string(), "a".to_string()];
        assert!(Vocab::from_words(words).is_err());
    }

    #[test]
    fn newline_handling_round_trips() {
        let v = Vocab::build(&build_entity_pool(1, 2, 2).unwrap()).unwrap();
        let ids = vec![BOS, PIPE, NEWLINE, NEWLINE, PIPE, COMMA, NEWLINE];
        assert_eq!(v.tokenize(&v.detokenize(&ids)).unwrap(), ids);
        assert!(v.tokenize("nope").is_err());
    }
}
