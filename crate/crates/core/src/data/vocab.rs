//! Closed word vocabulary over the caption templates.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::generate::{ARTICLES, CONNECTORS, COUNT_WORDS, FULL_STOP, INTROS, THING_COLORS};
use super::CATEGORIES;
use crate::error::{io_err, parse_json, Error, Result};

pub const VOCAB_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    version: u32,
    words: Vec<String>,
}

impl Vocabulary {
    pub fn new(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary word {w:?}")));
            }
        }
        Ok(Self { words, index })
    }

    /// Every word the caption templates can produce, sorted.
    pub fn builtin() -> Self {
        let mut set = BTreeSet::new();
        for group in INTROS.iter().chain(CONNECTORS.iter()) {
            set.extend(group.iter().copied());
        }
        set.extend(COUNT_WORDS);
        set.extend(ARTICLES);
        set.insert(FULL_STOP);
        set.extend(THING_COLORS.iter().map(|c| c.0));
        for c in &CATEGORIES {
            set.insert(c.name);
            set.insert(c.plural);
        }
        Self::new(set.into_iter().map(String::from).collect()).expect("template words are distinct")
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>> {
        words.iter().map(|w| self.id(w)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&VocabFile { version: VOCAB_VERSION, words: self.words.clone() })
            .expect("vocabulary serializes");
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: VocabFile = parse_json(path, &text)?;
        if file.version != VOCAB_VERSION {
            return Err(Error::Validation(format!("vocabulary version {} (expected {VOCAB_VERSION})", file.version)));
        }
        Self::new(file.words)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_word_is_named() {
        let v = Vocabulary::builtin();
        assert!(v.id("circle").is_ok());
        match v.id("zebra") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "zebra"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn covers_generated_captions() {
        let v = Vocabulary::builtin();
        let corpus = crate::data::generate_corpus(&crate::config::DataConfig::default(), 5, 50).unwrap();
        for s in &corpus {
            v.encode(&s.caption).unwrap();
        }
    }
}
