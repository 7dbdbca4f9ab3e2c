//! The 37-symbol recognition alphabet: CTC blank followed by `[0-9a-z]`.

use crate::error::{Error, Result};

pub const BLANK: usize = 0;
pub const NUM_CLASSES: usize = 37;
pub const MAX_TEXT_LEN: usize = 25;

const SYMBOLS: &str = "0123456789abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Charset {
    symbols: Vec<char>,
}

impl Default for Charset {
    fn default() -> Self {
        Self {
            symbols: SYMBOLS.chars().collect(),
        }
    }
}

impl Charset {
    /// Number of classes including the blank.
    pub fn len(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn blank_index(&self) -> usize {
        BLANK
    }

    /// Printable symbols in class order (class `i + 1` is `symbols()[i]`).
    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn as_string(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn index_of(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i + 1)
            .ok_or(Error::InvalidChar(c))
    }

    pub fn symbol(&self, class: usize) -> Option<char> {
        class.checked_sub(1).and_then(|i| self.symbols.get(i).copied())
    }

    /// Validates `text` and maps it to class indices (never the blank).
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let n = text.chars().count();
        if n == 0 || n > MAX_TEXT_LEN {
            return Err(Error::TextLength {
                len: n,
                max: MAX_TEXT_LEN,
            });
        }
        text.chars().map(|c| self.index_of(c)).collect()
    }

    /// Maps class indices back to text, skipping blanks and unknown classes.
    pub fn decode(&self, classes: &[usize]) -> String {
        classes.iter().filter_map(|&c| self.symbol(c)).collect()
    }
}

/// Comparison key for word accuracy: lowercase, alphanumeric characters only.
pub fn normalize_text(s: &str) -> String {
    s.chars()
        .filter(|c| c.is_alphanumeric())
        .flat_map(|c| c.to_lowercase())
        .collect()
}
