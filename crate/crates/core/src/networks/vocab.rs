use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Bijection between caption words and ids; ids 0..3 are reserved.
#[derive(Clone, Debug, PartialEq)]
pub struct VocabIndex {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl VocabIndex {
    /// Reserved tokens followed by `words` in first-seen order.
    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = VocabIndex { tokens: Vec::new(), ids: HashMap::new() };
        for w in RESERVED.into_iter().chain(words) {
            if !vocab.ids.contains_key(w) {
                vocab.ids.insert(w.to_string(), vocab.tokens.len());
                vocab.tokens.push(w.to_string());
            }
        }
        vocab
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3] != RESERVED {
            return Err(Error::Invalid(format!("vocabulary must start with {RESERVED:?}")));
        }
        let mut ids = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(VocabIndex { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `[BOS, w_1 .. w_T, EOS]` for a whitespace-separated sentence.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in sentence.split_whitespace() {
            ids.push(self.id(w).ok_or_else(|| Error::Invalid(format!("word `{w}` is not in the vocabulary")))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Words of an id sequence, skipping reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i > EOS)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.tokens)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_tokens(tokens)
    }
}
