//! Speculative decoding at desk scale.
//!
//! A small frozen transformer acts as the verifier. Drafts come from a
//! recurrent LSTM-style drafter that sees only the last token's hidden state
//! (optionally enriched by a `[SPEC]` token's hidden state) or from a suffix
//! index over the prompt and generated text. A hybrid loop routes each step
//! between tree verification and linear verification.

pub mod bench;
pub mod error;
pub mod hybrid_engine;
pub mod numerics;
pub mod owl_drafter;
pub mod spec_verifier;
pub mod suffix_drafter;
pub mod target_model;
pub mod trainer;
pub mod weight_file;

pub use error::{Error, Result};
