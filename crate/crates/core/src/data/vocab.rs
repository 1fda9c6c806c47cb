use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
/// Ids below this are special tokens.
pub const NUM_SPECIAL: u32 = 5;

const SPECIAL_NAMES: [&str; NUM_SPECIAL as usize] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Token strings and ids. Specials occupy the first five ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Specials followed by `tokens` in order.
    pub fn with_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let all = SPECIAL_NAMES
            .iter()
            .map(|s| s.to_string())
            .chain(tokens.into_iter().map(Into::into));
        Self::from_list(all)
    }

    fn from_list(all: impl Iterator<Item = String>) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for tok in all {
            if tok.is_empty() || tok.contains(char::is_whitespace) || tok.starts_with(JOINER) {
                return Err(Error::Format(format!("invalid token string {tok:?}")));
            }
            let id = tokens.len() as u32;
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Format(format!("duplicate token {tok:?}")));
            }
            tokens.push(tok);
        }
        for (id, name) in SPECIAL_NAMES.iter().enumerate() {
            if tokens.get(id).map(String::as_str) != Some(*name) {
                return Err(Error::Format(format!("id {id} must be {name}")));
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

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        id < NUM_SPECIAL
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; the id is the zero-based line number.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_list(text.lines().map(str::to_string))
    }
}

/// Prefix marking a token that continues the previous word in corpus files.
pub const JOINER: &str = "##";
