//! Token vocabulary with atomic delimiter tokens.
//!
//! Every vocabulary ends with the five special tokens, in this order:
//! `<t>`, `</t>`, `<a>`, `</a>`, `<e>`. Content symbols may be arbitrary
//! strings but can never equal a special string, so a special only reaches
//! the model as its atomic id or as a run of content glyphs that spells it
//! (see [`crate::tasks::canonicalize_tokens`]).

use serde::{Deserialize, Serialize};
use std::collections::HashMap;

use crate::error::{Error, Result};

pub type Token = u32;

pub const THINK_OPEN_STR: &str = "<t>";
pub const THINK_CLOSE_STR: &str = "</t>";
pub const ANSWER_OPEN_STR: &str = "<a>";
pub const ANSWER_CLOSE_STR: &str = "</a>";
pub const END_STR: &str = "<e>";

/// Single-character glyphs that can spell every special string.
pub const SPELLING_GLYPHS: [&str; 6] = ["<", "/", ">", "t", "a", "e"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Specials {
    pub think_open: Token,
    pub think_close: Token,
    pub answer_open: Token,
    pub answer_close: Token,
    pub end: Token,
}

impl Specials {
    pub fn all(&self) -> [Token; 5] {
        [
            self.think_open,
            self.think_close,
            self.answer_open,
            self.answer_close,
            self.end,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    symbols: Vec<String>,
    specials: Specials,
    #[serde(skip)]
    index: HashMap<String, Token>,
}

impl Vocabulary {
    /// Builds a vocabulary from content symbols; the five specials are appended.
    pub fn new<S: Into<String>>(content: impl IntoIterator<Item = S>) -> Result<Self> {
        let mut symbols: Vec<String> = content.into_iter().map(Into::into).collect();
        let n = symbols.len() as Token;
        for s in &symbols {
            if [THINK_OPEN_STR, THINK_CLOSE_STR, ANSWER_OPEN_STR, ANSWER_CLOSE_STR, END_STR]
                .contains(&s.as_str())
            {
                return Err(Error::Config(format!(
                    "content symbol {s:?} collides with a special token"
                )));
            }
            if s.is_empty() {
                return Err(Error::Config("empty content symbol".into()));
            }
        }
        symbols.extend(
            [THINK_OPEN_STR, THINK_CLOSE_STR, ANSWER_OPEN_STR, ANSWER_CLOSE_STR, END_STR]
                .iter()
                .map(|s| s.to_string()),
        );
        let specials = Specials {
            think_open: n,
            think_close: n + 1,
            answer_open: n + 2,
            answer_close: n + 3,
            end: n + 4,
        };
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as Token).is_some() {
                return Err(Error::Config(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self {
            symbols,
            specials,
            index,
        })
    }

    /// Digits `0..modulus`, the operators `+ - *`, the step separator `;`,
    /// and optionally the spelling glyphs.
    pub fn arithmetic(modulus: u32, glyphs: bool) -> Result<Self> {
        if !(2..=10).contains(&modulus) {
            return Err(Error::Config(format!(
                "modulus {modulus} must lie in 2..=10 (single-token residues)"
            )));
        }
        let mut content: Vec<String> = (0..modulus).map(|d| d.to_string()).collect();
        content.extend(["+", "-", "*", ";"].iter().map(|s| s.to_string()));
        if glyphs {
            content.extend(SPELLING_GLYPHS.iter().map(|s| s.to_string()));
        }
        Self::new(content)
    }

    /// `n` anonymous content symbols `c0 .. c{n-1}`.
    pub fn symbolic(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("c{i}")))
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn specials(&self) -> Specials {
        self.specials
    }

    pub fn is_special(&self, t: Token) -> bool {
        t >= self.specials.think_open && (t as usize) < self.symbols.len()
    }

    pub fn contains(&self, t: Token) -> bool {
        (t as usize) < self.symbols.len()
    }

    pub fn content_tokens(&self) -> Vec<Token> {
        (0..self.specials.think_open).collect()
    }

    pub fn all_tokens(&self) -> Vec<Token> {
        (0..self.symbols.len() as Token).collect()
    }

    pub fn symbol(&self, t: Token) -> Option<&str> {
        self.symbols.get(t as usize).map(String::as_str)
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn lookup(&self, symbol: &str) -> Option<Token> {
        self.index.get(symbol).copied()
    }

    pub fn decode(&self, tokens: &[Token]) -> String {
        tokens
            .iter()
            .map(|&t| self.symbol(t).unwrap_or("\u{fffd}"))
            .collect()
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|&&t| !self.contains(t)) {
            Some(&t) => Err(Error::TokenOutOfVocab(t)),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(symbols: Vec<String>) -> Result<Self> {
        let n = symbols.len();
        if n < 5 {
            return Err(Error::Config("vocabulary is missing its special tokens".into()));
        }
        let tail: Vec<&str> = symbols[n - 5..].iter().map(String::as_str).collect();
        if tail != [THINK_OPEN_STR, THINK_CLOSE_STR, ANSWER_OPEN_STR, ANSWER_CLOSE_STR, END_STR] {
            return Err(Error::Config("special tokens must close the vocabulary".into()));
        }
        Self::new(symbols.into_iter().take(n - 5))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.symbols
    }
}
