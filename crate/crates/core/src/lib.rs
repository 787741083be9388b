//! Prompt-based sentence embeddings and STS evaluation.
//!
//! Sentences are wrapped in a [`templates::PromptTemplate`], sent to a
//! [`backend::Backend`] for per-token hidden states, pooled into a vector
//! ([`pooling`]), and scored against human similarity judgements
//! ([`datasets`], [`metrics`]). [`eval`] ties these together and [`report`]
//! renders the results; [`store`] caches embeddings on disk.

pub mod analysis;
pub mod backend;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod pooling;
pub mod report;
pub mod store;
pub mod templates;

pub use error::{Error, ErrorKind, Result};
