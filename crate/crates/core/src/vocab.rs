//! Closed whitespace-token vocabulary with reserved control tokens.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Result, RlmError};

pub type TokenId = usize;
pub type StyleId = usize;

pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";
pub const BOS_TOKEN: &str = "[BOS]";
pub const EOS_TOKEN: &str = "[EOS]";

/// Token ids are dense in `[0, V)`; the four reserved tokens occupy
/// `0..4` in a fixed order, content tokens follow in insertion order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub const PAD: TokenId = 0;
    pub const MASK: TokenId = 1;
    pub const BOS: TokenId = 2;
    pub const EOS: TokenId = 3;
    pub const RESERVED: usize = 4;

    pub fn new() -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in [PAD_TOKEN, MASK_TOKEN, BOS_TOKEN, EOS_TOKEN] {
            v.intern(t);
        }
        v
    }

    /// Rebuild the lookup index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < Self::RESERVED
            || tokens[0] != PAD_TOKEN
            || tokens[1] != MASK_TOKEN
            || tokens[2] != BOS_TOKEN
            || tokens[3] != EOS_TOKEN
        {
            return Err(RlmError::InvalidData(
                "vocab must start with the reserved tokens".into(),
            ));
        }
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
        };
        v.reindex();
        if v.index.len() != v.tokens.len() {
            return Err(RlmError::InvalidData("duplicate vocab token".into()));
        }
        Ok(v)
    }

    pub fn intern(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id < Self::RESERVED
    }

    /// Non-reserved token ids, ascending. This is the decoder's candidate
    /// universe (plus `[PAD]` when deletion is enabled).
    pub fn content_ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        Self::RESERVED..self.tokens.len()
    }

    pub fn n_content(&self) -> usize {
        self.tokens.len() - Self::RESERVED
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[String]) -> Result<Vec<TokenId>> {
        words
            .iter()
            .map(|w| {
                self.id(w)
                    .ok_or_else(|| RlmError::InvalidData(format!("unknown token '{w}'")))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}
