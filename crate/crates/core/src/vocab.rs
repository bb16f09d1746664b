//! Token identifiers and their fixed-width binary encoding.
//!
//! The generation and detection networks never see token ids directly: every
//! id is written out big-endian as `bit_width` values in {0.0, 1.0}, which is
//! the input to the embedding stack.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(id: u32) -> Self {
        TokenId(id)
    }
}

/// Vocabulary size together with the number of bits needed to address it.
/// Serialised as the bare size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Vocabulary {
    size: u32,
    bit_width: u32,
}

impl TryFrom<u32> for Vocabulary {
    type Error = Error;

    fn try_from(size: u32) -> Result<Self> {
        Vocabulary::new(size)
    }
}

impl From<Vocabulary> for u32 {
    fn from(v: Vocabulary) -> u32 {
        v.size
    }
}

impl Vocabulary {
    /// Vocabulary of `size` tokens; `bit_width = ceil(log2(size))`.
    pub fn new(size: u32) -> Result<Self> {
        if size < 2 {
            return Err(Error::invariant("vocab_size", format!("must be at least 2, got {size}")));
        }
        let bit_width = 32 - (size - 1).leading_zeros();
        Ok(Vocabulary { size, bit_width })
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn bit_width(&self) -> usize {
        self.bit_width as usize
    }

    pub fn contains(&self, t: TokenId) -> bool {
        t.0 < self.size
    }

    pub fn check(&self, t: TokenId) -> Result<()> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(Error::OutOfVocab { id: t.0, size: self.size })
        }
    }
}

/// Big-endian binary representation of one token id.
#[derive(Debug, Clone, PartialEq)]
pub struct BitVector(Vec<f32>);

impl BitVector {
    pub fn bits(&self) -> &[f32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Inverse of [`encode_token_binary`].
    pub fn decode(&self) -> TokenId {
        TokenId(self.0.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b >= 0.5)))
    }
}

impl std::fmt::Display for BitVector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for &b in &self.0 {
            f.write_str(if b >= 0.5 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

pub fn encode_token_binary(t: TokenId, v: &Vocabulary) -> Result<BitVector> {
    v.check(t)?;
    let mut bits = vec![0.0; v.bit_width()];
    write_bits(t, v.bit_width(), &mut bits);
    Ok(BitVector(bits))
}

/// Writes the encoding of `t` into `out` (length `bit_width`) without validation.
pub(crate) fn write_bits<S: num_traits::Float>(t: TokenId, bit_width: usize, out: &mut [S]) {
    for (i, slot) in out.iter_mut().enumerate().take(bit_width) {
        let shift = bit_width - 1 - i;
        *slot = if (t.0 >> shift) & 1 == 1 { S::one() } else { S::zero() };
    }
}
