//! Whitespace/punctuation tokenizer and a frequency-built vocabulary.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Reserved ids. Everything else starts at [`RESERVED`].
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MASK: usize = 4;
pub const SEP: usize = 5;
pub const RESERVED: usize = 6;

pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>", "<mask>", "<sep>"];

/// Lowercase and split on whitespace, breaking punctuation out as
/// single-character tokens: "Hello, world!" → ["hello", ",", "world", "!"].
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Count token frequencies over `texts` and keep the `max_size - RESERVED`
    /// most frequent words. Ties break lexicographically, so the vocabulary
    /// is a pure function of the corpus regardless of iteration order.
    pub fn build(texts: impl IntoIterator<Item = impl AsRef<str>>, max_size: usize) -> Result<Self> {
        if max_size <= RESERVED {
            return Err(Error::Config(format!(
                "vocab size {max_size} leaves no room beyond the {RESERVED} reserved tokens"
            )));
        }
        let mut freq: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for tok in tokenize(text.as_ref()) {
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut entries: Vec<(String, u64)> = freq.into_iter().collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size - RESERVED);

        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(entries.into_iter().map(|(t, _)| t));
        Self::from_tokens(tokens)
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED || tokens[..RESERVED] != RESERVED_TOKENS.map(String::from) {
            return Err(Error::Format(
                "vocabulary must start with the reserved tokens in canonical order".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenize and map to ids, truncating to the first `max_len` tokens.
    pub fn encode(&self, text: &str, max_len: usize) -> Vec<usize> {
        let mut ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        ids.truncate(max_len);
        ids
    }

    /// Encode multi-turn context joined by `<sep>`. Truncation drops the
    /// OLDEST tokens: the most recent turns matter most.
    pub fn encode_context(&self, turns: &[String], max_len: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        for (i, turn) in turns.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            for tok in tokenize(turn) {
                ids.push(self.id(&tok));
            }
        }
        if ids.len() > max_len {
            ids.drain(..ids.len() - max_len);
        }
        ids
    }

    /// Ids back to text, skipping structural tokens. `<unk>` and `<mask>`
    /// survive: they carry signal about what the model actually saw.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != PAD && id != BOS && id != EOS && id != SEP)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }
}
