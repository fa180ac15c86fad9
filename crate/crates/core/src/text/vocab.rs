use std::collections::HashMap;

use super::tokenize_lower;

/// Token → index map. Index 0 is reserved for padding; tokens start at 1.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    index: HashMap<String, u32>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Indexes tokens in order of first appearance.
    pub fn build<I, D, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Self::default();
        for doc in docs {
            for tok in doc {
                vocab.insert(tok.as_ref());
            }
        }
        vocab
    }

    /// Tokenizes each text with [`tokenize_lower`] and indexes the result.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::build(texts.into_iter().map(tokenize_lower))
    }

    /// Rebuilds from tokens listed in index order (index 1 first).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut vocab = Self::default();
        for t in &tokens {
            vocab.insert(t);
        }
        vocab
    }

    fn insert(&mut self, tok: &str) -> u32 {
        if let Some(&i) = self.index.get(tok) {
            return i;
        }
        let i = self.tokens.len() as u32 + 1;
        self.index.insert(tok.to_owned(), i);
        self.tokens.push(tok.to_owned());
        i
    }

    pub fn get(&self, tok: &str) -> Option<u32> {
        self.index.get(tok).copied()
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.tokens.get(i as usize))
            .map(String::as_str)
    }

    /// Number of real tokens, excluding the padding slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in index order, starting with index 1.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
