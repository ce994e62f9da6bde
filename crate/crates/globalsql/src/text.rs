//! Tokenisation and the word vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Splits a question on whitespace, peeling punctuation off token edges.
/// Tokens keep their original case so values can be copied verbatim.
pub fn tokenize_question(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| matches!(c, '?' | '!' | ',' | ';' | ':' | '"' | '(' | ')'))
                .trim_end_matches('.')
                .trim_matches('\'')
        })
        .filter(|t| !t.is_empty())
        .map(String::from)
        .collect()
}

/// Lowercased name tokens of a schema identifier, split on underscores,
/// spaces and lower-to-upper case boundaries.
pub fn name_tokens(name: &str) -> Vec<String> {
    if name == "*" {
        return vec!["*".to_string()];
    }
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut prev_lower = false;
    for ch in name.chars() {
        if ch == '_' || ch == ' ' || ch == '-' {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            prev_lower = false;
            continue;
        }
        if ch.is_uppercase() && prev_lower && !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        prev_lower = ch.is_lowercase() || ch.is_ascii_digit();
        cur.extend(ch.to_lowercase());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub const UNK: &str = "<unk>";

/// Lowercased word list; id 0 is the shared unknown-word slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::from_words(std::iter::empty::<String>())
    }
}

impl Vocab {
    /// Builds a vocabulary from words in first-seen order.
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Vocab {
            words: vec![UNK.to_string()],
            index: BTreeMap::new(),
        };
        v.index.insert(UNK.to_string(), 0);
        for w in words {
            let w = w.as_ref().to_lowercase();
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), v.words.len());
                v.words.push(w);
            }
        }
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(0)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }
}
