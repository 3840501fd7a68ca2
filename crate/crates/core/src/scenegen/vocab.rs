//! Word-level caption vocabulary and tokenizer.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Caption token ids. Training targets end with `<end>`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from the reserved tokens followed by `words`
    /// (duplicates and reserved names are skipped).
    pub fn new<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        for w in words {
            let w = w.as_ref();
            if !index.contains_key(w) {
                index.insert(w.to_string(), tokens.len() as u32);
                tokens.push(w.to_string());
            }
        }
        Self { tokens, index }
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

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    /// Whitespace-split words to ids; unknown words become `<unk>` and the
    /// sequence is terminated with `<end>`.
    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let mut ids: Vec<u32> = text
            .split_whitespace()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect();
        ids.push(END);
        TokenSequence::new(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize): stops at `<end>`, drops
    /// `<pad>` and `<start>`.
    pub fn detokenize(&self, seq: &TokenSequence) -> String {
        let mut words = Vec::new();
        for &id in &seq.ids {
            match id {
                END => break,
                PAD | START => continue,
                _ => words.push(self.token(id).unwrap_or("<unk>")),
            }
        }
        words.join(" ")
    }

    /// One token per line; line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 4 || lines[..4] != RESERVED {
            return Err(Error::config(format!(
                "vocabulary {} must start with the reserved tokens {:?}",
                path.display(),
                RESERVED
            )));
        }
        let vocab = Self::new(&lines[4..]);
        if vocab.len() != lines.len() {
            return Err(Error::config(format!(
                "vocabulary {} contains duplicate tokens",
                path.display()
            )));
        }
        Ok(vocab)
    }
}
