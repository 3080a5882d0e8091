use std::collections::HashMap;

use crate::error::{Error, Result};

/// Fixed word-to-id mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            words: Vec::new(),
            ids: HashMap::new(),
        };
        for w in words {
            let w = w.into();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary word {w:?}")));
            }
            if v.ids.insert(w.clone(), v.words.len()).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
            }
            v.words.push(w);
        }
        if v.words.is_empty() {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        self.ids
            .get(word)
            .copied()
            .ok_or_else(|| Error::Dataset(format!("word {word:?} not in vocabulary")))
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        sentence.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens
            .iter()
            .map(|&t| self.word(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One word per line; the line number is the id.
    pub fn to_lines(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(text.lines().filter(|l| !l.is_empty()))
    }
}
