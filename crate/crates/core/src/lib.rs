//! Premise retrieval for formal mathematics libraries.
//!
//! The crate covers the whole offline pipeline: ingesting extracted
//! theorem/tactic corpora ([`corpus`]), training a WordPiece vocabulary
//! ([`tokenizer`]), a from-scratch transformer encoder with hand-written
//! backpropagation ([`encoder`]), the dense bi-encoder retriever
//! ([`retriever`]), the cross-encoder re-ranker ([`reranker`]) and the
//! graded-relevance evaluation harness ([`eval`]).
//!
//! Heavy inner loops (batch embedding, brute-force search, per-query
//! evaluation, per-example gradients) go through [`exec::Exec`], which runs
//! on rayon when the `parallel` feature is enabled and falls back to plain
//! iteration otherwise. Reductions always happen in a fixed order so both
//! modes produce bit-identical results.

pub mod artifact;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod pipeline;
pub mod reranker;
pub mod retriever;
pub mod synth;
pub mod tokenizer;

pub use error::{Error, Result};
pub use exec::Exec;
