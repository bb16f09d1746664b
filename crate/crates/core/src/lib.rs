//! Publicly verifiable text watermarking with two neural networks.
//!
//! A small generation network decides, from a window of token ids, whether
//! the last token is "green"; decoding boosts green logits. Detection either
//! recomputes the green count and runs a z-test (requires the generator) or
//! asks an LSTM detector that shares the generator's frozen token embedding
//! (requires nothing secret). The [`attacks`] module implements the two
//! forgery attacks used to probe how hard the generator is to recover.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacks;
pub mod config;
pub mod decoder;
pub mod detection;
pub mod error;
pub mod generator;
pub mod harness;
pub mod nn;
pub mod rng;
pub mod vocab;

pub use config::{load_config, WatermarkConfig};
pub use error::{Error, Result};
pub use rng::{new_rng, SeededRng};
pub use vocab::{encode_token_binary, BitVector, TokenId, Vocabulary};
