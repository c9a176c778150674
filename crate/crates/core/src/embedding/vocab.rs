use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

/// Surface forms of the reserved ids, in id order.
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

pub fn is_reserved(id: usize) -> bool {
    id < RESERVED.len()
}

/// Token/id mapping. Ids `0..4` are always PAD, SOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocab {
    /// Vocabulary holding only the reserved tokens.
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { tokens, index }
    }

    /// Reserved tokens followed by `words` in the given order.
    pub fn from_tokens<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self::new();
        for w in words {
            v.insert(w.into())?;
        }
        Ok(v)
    }

    /// Builds a vocabulary from whitespace-separated lowercase text, ordered
    /// by descending frequency with ties broken lexicographically.
    pub fn from_corpus<'s, I>(lines: I) -> Self
    where
        I: IntoIterator<Item = &'s str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in lines {
            for w in line.split_whitespace() {
                *counts.entry(w.to_lowercase()).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::from_tokens(words.into_iter().map(|(w, _)| w)).expect("counts are unique")
    }

    fn insert(&mut self, token: String) -> Result<usize> {
        if token.is_empty() || token.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("invalid token {token:?}")));
        }
        if self.index.contains_key(&token) {
            return Err(Error::Data(format!("duplicate token {token:?}")));
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    /// Size including reserved tokens.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Hex SHA-256 of the ordered token list.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }

    pub fn check_id(&self, id: usize) -> Result<()> {
        if id < self.len() {
            Ok(())
        } else {
            Err(Error::Lookup(format!("token id {id} outside vocabulary of {}", self.len())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_come_first() {
        let v = Vocab::from_tokens(["a", "b"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("</s>"), Some(EOS));
        assert_eq!(v.id("a"), Some(4));
        assert_eq!(v.token(UNK), Some("<unk>"));
    }

    #[test]
    fn duplicates_rejected() {
        assert!(Vocab::from_tokens(["a", "a"]).is_err());
        assert!(Vocab::from_tokens(["</s>"]).is_err());
    }

    #[test]
    fn corpus_order_is_frequency_then_lexicographic() {
        let v = Vocab::from_corpus(["b a c", "c b", "C"]);
        assert_eq!(&v.tokens()[4..], &["c", "b", "a"]);
    }
}
