//! Byte-level token ids, language prefixes and wildcard masking.
//!
//! Every word is fed to the model as the raw UTF-8 bytes of `<tag>:word`.
//! Ids 0..=2 are reserved for padding, end of sequence and the decoder start
//! symbol; byte `b` becomes id `b + 3`, so the vocabulary has 259 entries.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const BOS: u32 = 2;
pub const BYTE_OFFSET: u32 = 3;
pub const VOCAB_SIZE: usize = 259;

/// The reserved wildcard tag used for zero-shot prediction.
pub const WILDCARD: &str = "unk";

/// A language or variety code such as `eng-us`, used as a conditioning prefix.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let valid_len = (2..=16).contains(&code.len());
        let valid_chars = code
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-');
        if valid_len && valid_chars {
            Ok(LanguageTag(code))
        } else {
            Err(Error::InvalidTag(code))
        }
    }

    pub fn wildcard() -> Self {
        LanguageTag(WILDCARD.to_owned())
    }

    pub fn is_wildcard(&self) -> bool {
        self.0 == WILDCARD
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `<code>:`
    pub fn prefix(&self) -> String {
        format!("<{}>:", self.0)
    }

    /// Parses a rendered prefix (`<code>:`) back into a tag.
    pub fn from_prefix(prefix: &str) -> Result<Self> {
        prefix
            .strip_prefix('<')
            .and_then(|rest| rest.strip_suffix(">:"))
            .ok_or_else(|| Error::InvalidTag(prefix.to_owned()))
            .and_then(LanguageTag::new)
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LanguageTag::new(s)
    }
}

impl TryFrom<String> for LanguageTag {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        LanguageTag::new(s)
    }
}

impl From<LanguageTag> for String {
    fn from(tag: LanguageTag) -> String {
        tag.0
    }
}

/// Ordered token ids, each in `[0, 258]`, with padding only as a suffix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= VOCAB_SIZE) {
            return Err(Error::InvalidInput(format!("token id {bad} out of range")));
        }
        let first_pad = ids.iter().position(|&id| id == PAD).unwrap_or(ids.len());
        if ids[first_pad..].iter().any(|&id| id != PAD) {
            return Err(Error::InvalidInput(
                "padding must be a contiguous suffix".into(),
            ));
        }
        Ok(TokenSequence(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of ids before the padding suffix.
    pub fn unpadded_len(&self) -> usize {
        self.0.iter().position(|&id| id == PAD).unwrap_or(self.0.len())
    }

    /// True for model inputs/targets: exactly one EOS, located right before any padding.
    pub fn is_well_formed(&self) -> bool {
        let n = self.unpadded_len();
        n > 0
            && self.0[n - 1] == EOS
            && self.0[..n - 1].iter().all(|&id| id != EOS && id != BOS)
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }
}

#[inline]
pub fn byte_to_id(b: u8) -> u32 {
    u32::from(b) + BYTE_OFFSET
}

/// Returns the byte for a byte id, `None` for special ids.
#[inline]
pub fn id_to_byte(id: u32) -> Option<u8> {
    id.checked_sub(BYTE_OFFSET).and_then(|b| u8::try_from(b).ok())
}

/// Encodes `<tag>:word` (or the bare word) as byte ids followed by one EOS.
pub fn encode(word: &str, tag: Option<&LanguageTag>) -> Result<TokenSequence> {
    if word.is_empty() {
        return Err(Error::InvalidInput("empty word".into()));
    }
    if word.contains(['\n', '\r', '\t']) {
        return Err(Error::InvalidInput(format!(
            "word {word:?} contains a tab or newline"
        )));
    }
    let prefix = tag.map(LanguageTag::prefix).unwrap_or_default();
    let mut ids = Vec::with_capacity(prefix.len() + word.len() + 1);
    ids.extend(prefix.bytes().chain(word.bytes()).map(byte_to_id));
    ids.push(EOS);
    Ok(TokenSequence(ids))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub text: String,
    /// Set when some invalid UTF-8 was replaced with U+FFFD.
    pub lossy: bool,
}

/// Drops special ids and decodes the remaining bytes as UTF-8, replacing invalid runs.
pub fn decode(ids: &[u32]) -> Decoded {
    let bytes: Vec<u8> = ids.iter().filter_map(|&id| id_to_byte(id)).collect();
    match String::from_utf8(bytes) {
        Ok(text) => Decoded { text, lossy: false },
        Err(err) => Decoded {
            text: String::from_utf8_lossy(err.as_bytes()).into_owned(),
            lossy: true,
        },
    }
}

/// Independently replaces each entry's tag by the wildcard with probability `rate`.
pub fn mask_language_tags<W: Clone, R: Rng + ?Sized>(
    batch: &[(W, LanguageTag)],
    rate: f64,
    rng: &mut R,
) -> Result<Vec<(W, LanguageTag)>> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidInput(format!(
            "mask rate {rate} outside [0, 1]"
        )));
    }
    Ok(batch
        .iter()
        .map(|(word, tag)| {
            let masked = rng.gen::<f64>() < rate;
            let tag = if masked {
                LanguageTag::wildcard()
            } else {
                tag.clone()
            };
            (word.clone(), tag)
        })
        .collect())
}
