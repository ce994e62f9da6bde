//! A zero-shot text-to-SQL parser that reasons globally over the database
//! schema before and after decoding.
//!
//! The flow for one question is: link question words to schema constants,
//! predict a global relevance for every constant with a gated graph network,
//! encode the gated schema graph, decode SQL top-down under a grammar with
//! beam search, then re-rank the beam by the set of constants each candidate
//! uses.

pub mod cli;
pub mod error;
pub mod gating;
pub mod grammar;
pub mod graph;
pub mod linking;
pub mod model;
pub mod neural;
pub mod parser;
pub mod pipeline;
pub mod reranker;
pub mod schema;
pub mod sql;
pub mod text;

pub use error::{Error, Result};
