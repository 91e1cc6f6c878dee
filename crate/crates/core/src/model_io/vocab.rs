use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_ID: usize = 0;
pub const BOS_TOKEN: &str = "<bos>";

/// Whitespace word vocabulary; id = position, id 0 is always BOS.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from an ordered token list. The first entry is the
    /// BOS token.
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("vocabulary is empty (BOS required)".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// `<bos>` followed by `words`.
    pub fn from_words<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = vec![BOS_TOKEN.to_string()];
        tokens.extend(words.into_iter().map(Into::into));
        Self::new(tokens)
    }

    /// Synthetic vocabulary `<bos>, w1, ..., w{n-1}` for fixtures.
    pub fn synthetic(size: usize) -> Self {
        Self::from_words((1..size).map(|i| format!("w{i}"))).expect("synthetic words are unique")
    }

    /// One token per line; line number = id.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(text.lines().map(str::to_string).collect())
    }

    pub fn to_file_contents(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.ids.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Splits on whitespace and prepends BOS.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS_ID];
        for word in text.split_whitespace() {
            ids.push(self.id(word).ok_or_else(|| Error::Tokenize(word.to_string()))?);
        }
        Ok(ids)
    }

    /// Inverse of [`tokenize`](Self::tokenize): drops a leading BOS and joins
    /// the remaining words with single spaces.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let body = match ids.first() {
            Some(&BOS_ID) => &ids[1..],
            _ => ids,
        };
        let words = body
            .iter()
            .map(|&id| {
                self.token(id)
                    .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    /// Display label for a token id (falls back to `#id`).
    pub fn label(&self, id: usize) -> String {
        self.token(id).map_or_else(|| format!("#{id}"), str::to_string)
    }
}
