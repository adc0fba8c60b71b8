use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Beginning-of-sequence marker (reserved, never produced by `tokenize`).
pub const BOS: u32 = 256;
/// End-of-document marker; generation stops when it is sampled.
pub const EOS: u32 = 257;
/// 256 byte values plus the two specials.
pub const BYTE_VOCAB: usize = 258;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Generated,
}

/// A token sequence tagged with its provenance.
///
/// `prompt_len` tokens condition the model but are not scored.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    tokens: Vec<u32>,
    origin: Origin,
    prompt_len: usize,
}

impl TokenSeq {
    pub fn new(
        tokens: Vec<u32>,
        origin: Origin,
        prompt_len: usize,
        vocab_size: usize,
    ) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Sequence("empty token sequence".into()));
        }
        if let Some((i, &t)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= vocab_size)
        {
            return Err(Error::Sequence(format!(
                "token {t} at position {i} outside vocabulary of size {vocab_size}"
            )));
        }
        if prompt_len > tokens.len() {
            return Err(Error::Sequence(format!(
                "prompt_len {prompt_len} exceeds length {}",
                tokens.len()
            )));
        }
        Ok(Self {
            tokens,
            origin,
            prompt_len,
        })
    }

    /// A human-written sequence over the byte vocabulary with no prompt.
    pub fn real(tokens: Vec<u32>) -> Result<Self> {
        Self::new(tokens, Origin::Real, 0, BYTE_VOCAB)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    /// Same tokens with a different scoring boundary.
    pub fn with_prompt_len(&self, prompt_len: usize) -> Result<Self> {
        if prompt_len > self.tokens.len() {
            return Err(Error::Sequence(format!(
                "prompt_len {prompt_len} exceeds length {}",
                self.tokens.len()
            )));
        }
        Ok(Self {
            prompt_len,
            ..self.clone()
        })
    }

    /// Positions whose token is scored: the first token has no context, and
    /// prompt tokens only condition. Logit row `i - 1` predicts position `i`.
    pub fn scored_positions(&self) -> Range<usize> {
        self.prompt_len.max(1)..self.tokens.len()
    }
}

/// Byte string to tokens, one token per byte.
pub fn tokenize(text: &[u8]) -> Result<TokenSeq> {
    if text.is_empty() {
        return Err(Error::Empty("cannot tokenize empty text".into()));
    }
    TokenSeq::real(text.iter().map(|&b| b as u32).collect())
}

/// Inverse of [`tokenize`]; special tokens are dropped.
pub fn detokenize(tokens: &[u32]) -> Vec<u8> {
    tokens
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(tokenize(b"ab").unwrap().tokens(), &[97, 98]);
        assert!(tokenize(b"").is_err());
    }

    #[test]
    fn multibyte_utf8_round_trips() {
        let s = "naïve café — 東京";
        let t = tokenize(s.as_bytes()).unwrap();
        assert_eq!(t.len(), s.len());
        assert_eq!(detokenize(t.tokens()), s.as_bytes());
    }

    #[test]
    fn invariants_checked_on_construction() {
        assert!(TokenSeq::new(vec![], Origin::Real, 0, 4).is_err());
        assert!(TokenSeq::new(vec![1, 4], Origin::Real, 0, 4).is_err());
        assert!(TokenSeq::new(vec![1, 2], Origin::Real, 3, 4).is_err());
        let s = TokenSeq::new(vec![1, 2, 3], Origin::Generated, 2, 4).unwrap();
        assert_eq!(s.scored_positions(), 2..3);
        assert_eq!(
            TokenSeq::real(vec![1, 2, 3]).unwrap().scored_positions(),
            1..3
        );
    }

    proptest! {
        #[test]
        fn tokenize_is_a_bijection(bytes in proptest::collection::vec(any::<u8>(), 1..200)) {
            let t = tokenize(&bytes).unwrap();
            prop_assert_eq!(detokenize(t.tokens()), bytes);
        }
    }
}
