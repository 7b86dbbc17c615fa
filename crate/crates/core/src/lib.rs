//! Hierarchical conversational memory.
//!
//! A message stream is distilled into episodes, episodes into semantic facts,
//! and facts are grouped into themes whose partition is steered by a
//! balance-plus-coherence guidance score. Queries are answered top-down: a
//! coverage/relevance greedy picks representative themes and facts, then
//! episodes and raw messages are admitted only when they lower the reader's
//! uncertainty.

// Range checks are written as `!(lo < x && x < hi)` so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod chat;
pub mod dataset;
pub mod distill;
pub mod embedding;
pub mod engine;
pub mod error;
pub mod eval;
pub mod graph;
mod http;
pub mod model;
pub mod prompts;
pub mod providers;
pub mod retrieval;
pub mod store;
pub mod structure;
pub mod text;

pub use error::{Error, Result};
