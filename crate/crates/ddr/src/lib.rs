//! Disentangled dense retrieval at desk scale.
//!
//! A bi-encoder retrieval engine whose model is split into two separately
//! trained pieces: a Transformer backbone that absorbs corpus-specific
//! language features through masked-language-model training (the domain
//! adaptation module), and small insertable bottleneck networks — low-rank
//! attention deltas plus parallel adapters — that learn query/document
//! matching from labeled data once and are reused across corpora (the
//! relevance estimation module).
//!
//! The crate carries the whole pipeline: tensor math with reverse-mode
//! differentiation, the encoder, the insertable modules, masking and the
//! training loops, a synthetic domain-shift benchmark generator, exact
//! dense search with a BM25 baseline and TREC-style metrics, checkpointing,
//! and the experiment driver behind the `ddr` binary.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod rem;
pub mod retrieval;
pub mod training;

pub use error::{DdrError, Result};
