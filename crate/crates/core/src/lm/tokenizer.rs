use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed printable alphabet of the character-level tokenizer. Token id = index.
pub const ALPHABET: &str = " abcdefghijklmnopqrstuvwxyz0123456789.,;:!?/|-+=()";

pub fn vocab_size() -> usize {
    ALPHABET.len()
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| ALPHABET.find(c).ok_or(Error::UnknownToken(c)))
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens
        .iter()
        .map(|&t| ALPHABET.as_bytes().get(t).map_or('\u{fffd}', |&b| b as char))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Prompt,
    Response,
}

/// Token ids with a prompt/response label per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub roles: Vec<Role>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, roles: Vec<Role>) -> Result<Self> {
        if tokens.len() != roles.len() {
            return Err(Error::InvalidConfig(format!(
                "{} tokens but {} role labels",
                tokens.len(),
                roles.len()
            )));
        }
        Ok(Self { tokens, roles })
    }

    /// Prompt followed by response.
    pub fn from_parts(prompt: &[usize], response: &[usize]) -> Self {
        let tokens = prompt.iter().chain(response).copied().collect();
        let roles = std::iter::repeat_n(Role::Prompt, prompt.len())
            .chain(std::iter::repeat_n(Role::Response, response.len()))
            .collect();
        Self { tokens, roles }
    }

    /// Entire sequence labelled as prompt (plain language-model text).
    pub fn plain(tokens: Vec<usize>) -> Self {
        let roles = vec![Role::Prompt; tokens.len()];
        Self { tokens, roles }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn response_len(&self) -> usize {
        self.roles.iter().filter(|&&r| r == Role::Response).count()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if let Some(&t) = self.tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::InvalidConfig(format!(
                "token id {t} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_unknown_characters() {
        let ids = encode("count 3 7:").unwrap();
        assert_eq!(decode(&ids), "count 3 7:");
        assert!(matches!(encode("A"), Err(Error::UnknownToken('A'))));
        assert_eq!(ALPHABET.chars().count(), vocab_size());
    }

    #[test]
    fn parts_are_labelled() {
        let s = TokenSequence::from_parts(&[1, 2], &[3]);
        assert_eq!(s.roles, vec![Role::Prompt, Role::Prompt, Role::Response]);
        assert_eq!(s.response_len(), 1);
        assert!(s.validate(3).is_err());
    }
}
