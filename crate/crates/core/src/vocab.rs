use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";

/// Token inventory: three specials (`PAD`, `MASK`, `EOS`) followed by the
/// content tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    content: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    pub const PAD: TokenId = 0;
    pub const MASK: TokenId = 1;
    pub const EOS: TokenId = 2;
    pub const FIRST_CONTENT: TokenId = 3;
    pub const SPECIAL_NAMES: [&'static str; 3] = ["<pad>", "<mask>", "<eos>"];

    pub fn new(content: Vec<String>) -> Result<Self> {
        if content.is_empty() {
            return Err(Error::Config("vocabulary needs at least one content token".into()));
        }
        let mut index = HashMap::new();
        for (i, name) in content.iter().enumerate() {
            if Self::SPECIAL_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!("content token {name:?} collides with a special")));
            }
            if index.insert(name.clone(), Self::FIRST_CONTENT + i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate content token {name:?}")));
            }
        }
        Ok(Vocabulary { content, index })
    }

    /// `n` single-character tokens (`a`, `b`, ...), falling back to `t<i>`
    /// names beyond the built-in alphabet.
    pub fn synthetic(n: usize) -> Result<Self> {
        let names = (0..n)
            .map(|i| match SYMBOLS.chars().nth(i) {
                Some(c) => c.to_string(),
                None => format!("t{i}"),
            })
            .collect();
        Self::new(names)
    }

    /// Total size including specials.
    pub fn size(&self) -> usize {
        self.content.len() + Self::FIRST_CONTENT as usize
    }

    pub fn content_len(&self) -> usize {
        self.content.len()
    }

    pub fn content_id(&self, index: usize) -> TokenId {
        assert!(index < self.content.len());
        Self::FIRST_CONTENT + index as TokenId
    }

    pub fn content_index(&self, id: TokenId) -> Option<usize> {
        (id >= Self::FIRST_CONTENT && ((id - Self::FIRST_CONTENT) as usize) < self.content.len())
            .then(|| (id - Self::FIRST_CONTENT) as usize)
    }

    /// Tokens a decoder may emit: everything but `MASK` and `PAD`.
    pub fn is_predictable(&self, id: TokenId) -> bool {
        id == Self::EOS || self.content_index(id).is_some()
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        match id {
            Self::PAD | Self::MASK | Self::EOS => Some(Self::SPECIAL_NAMES[id as usize]),
            _ => self.content_index(id).map(|i| self.content[i].as_str()),
        }
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        match Self::SPECIAL_NAMES.iter().position(|s| *s == name) {
            Some(i) => Some(i as TokenId),
            None => self.index.get(name).copied(),
        }
    }

    /// Space-separated rendering.
    pub fn render(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&id| self.name(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn parse(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| Error::Input(format!("unknown token {w:?}"))))
            .collect()
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(content: Vec<String>) -> Result<Self> {
        Self::new(content)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.content
    }
}
