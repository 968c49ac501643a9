use std::collections::HashMap;
use std::path::Path;

use super::{NUM_SPECIAL, SPECIAL_TOKENS, UNK};
use crate::error::{Error, Result};

/// Lowercased word tokens; every punctuation character is its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Splits corpus text into documents of sentences (raw lines).
pub fn parse_corpus(text: &str) -> Vec<Vec<String>> {
    let mut docs = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            if !cur.is_empty() {
                docs.push(std::mem::take(&mut cur));
            }
        } else {
            cur.push(line.to_string());
        }
    }
    if !cur.is_empty() {
        docs.push(cur);
    }
    docs
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Keeps the `cap - 5` most frequent tokens after the special tokens;
/// frequency ties are broken lexicographically.
pub fn build_vocab(corpus: &str, cap: usize) -> Result<Vocab> {
    if cap <= NUM_SPECIAL {
        return Err(Error::Config(format!("vocab cap {cap} must exceed {NUM_SPECIAL}")));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for tok in corpus.lines().flat_map(tokenize) {
        *counts.entry(tok).or_default() += 1;
    }
    for s in SPECIAL_TOKENS {
        counts.remove(s);
    }
    if counts.is_empty() {
        return Err(Error::Data("corpus contains no tokens".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(cap - NUM_SPECIAL);
    Vocab::from_tokens(
        SPECIAL_TOKENS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect(),
    )
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_SPECIAL || tokens[..NUM_SPECIAL] != SPECIAL_TOKENS {
            return Err(Error::Data("vocab must start with the five special tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; the line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
