//! Deterministic randomness.
//!
//! Every stream is a ChaCha20 keystream (RFC 8439 core, via `rand_chacha`)
//! keyed by 32 bytes of seed material. The root key is SHA-256 of the seed's
//! little-endian bytes; `derive(label)` keys a child stream with
//! SHA-256(parent key || label). Children depend only on the parent's key,
//! never on how many values the parent has already produced.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone)]
pub struct SeededRng {
    key: [u8; 32],
    inner: ChaCha20Rng,
}

pub fn new_rng(seed: u64) -> SeededRng {
    SeededRng::new(seed)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        let key: [u8; 32] = Sha256::digest(seed.to_le_bytes()).into();
        Self::from_key(key)
    }

    fn from_key(key: [u8; 32]) -> Self {
        SeededRng { key, inner: ChaCha20Rng::from_seed(key) }
    }

    /// Independent sub-stream identified by `label`.
    pub fn derive(&self, label: &str) -> SeededRng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(label.as_bytes());
        Self::from_key(h.finalize().into())
    }

    /// Sub-stream identified by a label and an index (e.g. one per sequence).
    pub fn derive_indexed(&self, label: &str, index: u64) -> SeededRng {
        let mut h = Sha256::new();
        h.update(self.key);
        h.update(label.as_bytes());
        h.update(b"#");
        h.update(index.to_le_bytes());
        Self::from_key(h.finalize().into())
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n), n > 0. Lemire's method with rejection.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let m = (self.inner.next_u64() as u128) * (n as u128);
            if (m as u64) >= threshold {
                return (m >> 64) as u64;
            }
        }
    }

    /// Uniform integer in the inclusive range [lo, hi].
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    pub fn token(&mut self, vocab: &Vocabulary) -> TokenId {
        TokenId(self.below(u64::from(vocab.size())) as u32)
    }

    pub fn tokens(&mut self, vocab: &Vocabulary, n: usize) -> Vec<TokenId> {
        (0..n).map(|_| self.token(vocab)).collect()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Standard normal draw (Box-Muller, one value per call).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
