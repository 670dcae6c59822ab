//! Training a semi-parametric sparse retriever against a pluggable RAG
//! environment.
//!
//! The pipeline: a shallow sparse encoder searches a frozen bag-of-tokens
//! inverted index (with optional late parametric re-ranking), retrieved
//! documents are labeled positive/negative on the fly from environment
//! feedback via conditional-probability thresholds, and the encoder is
//! optimized with a two-channel contrastive loss. A deterministic mock
//! environment and a remote completions-style client are interchangeable
//! backends.

pub mod cache;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod env;
pub mod error;
pub mod harness;
pub mod index;
pub mod labeler;
pub mod parallel;
pub mod sparse;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
