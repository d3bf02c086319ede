//! Speculative decoding with frequency-ranked draft vocabularies.
//!
//! A seeded toy transformer serves as the target model. The draft model is a
//! single transformer block that shares the target's embedding, final norm
//! and LM head. Drafting grows a token tree by beam search. Optionally the
//! draft's LM head is restricted to the most frequent tokens of a corpus.
//! The target verifies the whole tree in one forward pass, using a tree
//! attention mask.

pub mod drafting;
pub mod engine;
mod error;
pub mod kernels;
pub mod model;
pub mod profiler;
pub mod verification;
pub mod vocab;

pub use error::{Error, Result};
