//! Byte-level tokenizer with an atomic special-token region.
//!
//! Ids `0..256` are raw bytes. Specials follow from id 256 in a fixed order:
//! `<pad> <bos> <eos> <img> <nexa_end>`, then the functional tokens
//! `<nexa_0> … <nexa_{n-1}>` once the vocabulary has been extended.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BYTE_TOKENS: usize = 256;
pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const IMG: u32 = 259;
pub const NEXA_END: u32 = 260;
pub const FIRST_FUNCTIONAL: u32 = 261;

const BASE_SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<img>", "<nexa_end>"];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("token id {id} outside vocabulary of size {size}")]
    InvalidTokenId { id: u32, size: usize },
    #[error("vocabulary already carries functional tokens")]
    AlreadyExtended,
    #[error("malformed vocabulary: {0}")]
    Malformed(String),
}

pub type TokenSequence = Vec<u32>;

pub fn functional_surface(index: usize) -> String {
    format!("<nexa_{index}>")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    specials: Vec<String>,
    extended: bool,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// Byte region plus the five base specials.
    pub fn new() -> Self {
        Self {
            specials: BASE_SPECIALS.iter().map(|s| s.to_string()).collect(),
            extended: false,
        }
    }

    /// Rebuilds a vocabulary from its serialized specials list.
    pub fn from_specials(specials: &[String], extended: bool) -> Result<Self, TokenizerError> {
        if specials.len() < BASE_SPECIALS.len()
            || specials.iter().zip(BASE_SPECIALS).any(|(a, b)| a != b)
        {
            return Err(TokenizerError::Malformed(
                "base specials out of order".into(),
            ));
        }
        for (i, s) in specials[BASE_SPECIALS.len()..].iter().enumerate() {
            if *s != functional_surface(i) {
                return Err(TokenizerError::Malformed(format!(
                    "expected {} got {s}",
                    functional_surface(i)
                )));
            }
        }
        if !extended && specials.len() > BASE_SPECIALS.len() {
            return Err(TokenizerError::Malformed(
                "functional tokens present on an unextended vocabulary".into(),
            ));
        }
        Ok(Self {
            specials: specials.to_vec(),
            extended,
        })
    }

    pub fn specials(&self) -> &[String] {
        &self.specials
    }

    pub fn size(&self) -> usize {
        BYTE_TOKENS + self.specials.len()
    }

    pub fn is_extended(&self) -> bool {
        self.extended
    }

    pub fn functional_count(&self) -> usize {
        self.specials.len() - BASE_SPECIALS.len()
    }

    pub fn functional_id(&self, index: usize) -> Option<u32> {
        (index < self.functional_count()).then(|| FIRST_FUNCTIONAL + index as u32)
    }

    /// Functional-token index for `id`, if it is one.
    pub fn functional_index(&self, id: u32) -> Option<usize> {
        let i = id.checked_sub(FIRST_FUNCTIONAL)? as usize;
        (i < self.functional_count()).then_some(i)
    }

    pub fn is_byte(id: u32) -> bool {
        (id as usize) < BYTE_TOKENS
    }

    /// Appends `<nexa_0> … <nexa_{n-1}>`; existing ids are untouched.
    pub fn extend_with_functional_tokens(&self, n: usize) -> Result<Vocabulary, TokenizerError> {
        if self.extended {
            return Err(TokenizerError::AlreadyExtended);
        }
        let mut specials = self.specials.clone();
        specials.extend((0..n).map(functional_surface));
        Ok(Vocabulary {
            specials,
            extended: true,
        })
    }

    pub fn surface(&self, id: u32) -> Option<&str> {
        let i = (id as usize).checked_sub(BYTE_TOKENS)?;
        self.specials.get(i).map(String::as_str)
    }

    /// Longest special surface matching at the start of `rest`.
    fn match_special(&self, rest: &[u8]) -> Option<(u32, usize)> {
        let mut best: Option<(u32, usize)> = None;
        for (i, s) in self.specials.iter().enumerate() {
            if rest.starts_with(s.as_bytes()) && best.map_or(true, |(_, l)| s.len() > l) {
                best = Some(((BYTE_TOKENS + i) as u32, s.len()));
            }
        }
        best
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0;
        while i < bytes.len() {
            if bytes[i] == b'<' {
                if let Some((id, len)) = self.match_special(&bytes[i..]) {
                    out.push(id);
                    i += len;
                    continue;
                }
            }
            out.push(u32::from(bytes[i]));
            i += 1;
        }
        out
    }

    /// Raw bytes for a token run; specials expand to their surface text.
    pub fn decode_bytes(&self, tokens: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if Self::is_byte(t) {
                out.push(t as u8);
            } else {
                let s = self.surface(t).ok_or(TokenizerError::InvalidTokenId {
                    id: t,
                    size: self.size(),
                })?;
                out.extend_from_slice(s.as_bytes());
            }
        }
        Ok(out)
    }

    /// Inverse of [`Vocabulary::encode`]. Invalid UTF-8 byte runs (possible in
    /// unconstrained model output) are replaced with U+FFFD.
    pub fn decode(&self, tokens: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(tokens)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }
}
