use serde::{Deserialize, Serialize};

use super::DatasetError;

/// Elements written with two letters that must not be split.
const TWO_CHAR_ELEMENTS: [&str; 2] = ["Cl", "Br"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenation of the tokens; re-tokenizing it gives the same sequence.
    pub fn to_text(&self) -> String {
        self.tokens.concat()
    }
}

/// Splits a SMILES string into opaque tokens: bracket atoms `[...]` and the
/// two-letter elements `Cl`/`Br` are single tokens, every other character
/// is its own token.
pub fn tokenize_smiles(text: &str) -> Result<TokenSequence, DatasetError> {
    let mut tokens = Vec::new();
    let mut rest = text;
    let mut offset = 0;
    while let Some(c) = rest.chars().next() {
        let len = if c == '[' {
            match rest.find(']') {
                Some(end) => end + 1,
                None => return Err(DatasetError::UnclosedBracket { position: offset }),
            }
        } else if TWO_CHAR_ELEMENTS.iter().any(|e| rest.starts_with(e)) {
            2
        } else {
            c.len_utf8()
        };
        tokens.push(rest[..len].to_string());
        rest = &rest[len..];
        offset += len;
    }
    Ok(TokenSequence { tokens })
}
