//! Decoding-free listwise reranking from attention heads of a toy decoder,
//! with preference optimization carried out directly in attention-score space.
//!
//! Pipeline: build adjacent-level preference pairs, select core retrieval
//! heads, train with the unified objective against a frozen reference, re-run
//! head selection, then rerank with a single depth-truncated prefill.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rerank;
pub mod scoring;
pub mod selection;
pub mod training;

pub use error::{Error, Result};
pub use model::{HeadId, ModelConfig, TransformerParams};
