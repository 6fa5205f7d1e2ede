//! Activation patching for relevance judgment with decoder-only transformers.

pub mod error;
pub mod eval;
pub mod fixture;
pub mod heads;
pub mod intervention;
pub mod model;
pub mod patching;
pub mod positions;
pub mod prompt;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
