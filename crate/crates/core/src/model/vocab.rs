use std::collections::HashMap;

use crate::error::{Error, Result};

pub const SOS: &str = "[SOS]";
pub const EOS: &str = "[EOS]";
pub const SOS_ID: usize = 0;
pub const EOS_ID: usize = 1;

/// Word-level vocabulary with `[SOS]` and `[EOS]` at ids 0 and 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    name: &'static str,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new<S: AsRef<str>>(
        name: &'static str,
        words: impl IntoIterator<Item = S>,
    ) -> Result<Self> {
        let mut v = Self {
            name,
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for w in [SOS, EOS] {
            v.push(w)?;
        }
        for w in words {
            v.push(w.as_ref())?;
        }
        Ok(v)
    }

    /// Rebuilds a vocabulary from its full token list, specials included.
    pub fn from_tokens(name: &'static str, tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[SOS_ID] != SOS || tokens[EOS_ID] != EOS {
            return Err(Error::Data(format!(
                "{name} vocabulary must start with {SOS}, {EOS}"
            )));
        }
        Self::new(name, tokens.into_iter().skip(2))
    }

    fn push(&mut self, w: &str) -> Result<()> {
        if self.index.contains_key(w) {
            return Err(Error::Data(format!(
                "duplicate token {w:?} in {} vocabulary",
                self.name
            )));
        }
        self.index.insert(w.to_string(), self.tokens.len());
        self.tokens.push(w.to_string());
        Ok(())
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

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken {
                vocab: self.name,
                token: token.to_string(),
            })
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(String::as_str)
            .ok_or(Error::TokenId {
                vocab: self.name,
                id,
                size: self.tokens.len(),
            })
    }

    /// Maps words to ids and frames them with `[SOS]`/`[EOS]`.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(SOS_ID);
        for w in words {
            ids.push(self.id(w.as_ref())?);
        }
        ids.push(EOS_ID);
        Ok(ids)
    }

    /// Inverse of [`Vocab::encode`]; strips the frame.
    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        let inner = match ids {
            [SOS_ID, inner @ .., EOS_ID] => inner,
            _ => return Err(Error::Framing),
        };
        inner
            .iter()
            .map(|&i| self.token(i).map(str::to_string))
            .collect()
    }
}
