//! KV-cache eviction that keeps the pairs a model relies on to re-read its own context.
//!
//! A toy grouped-query-attention transformer ([`tinylm`]) prefills a context
//! into a [`kvcache::KvCache`]. [`scoring`] assigns every cached pair an
//! importance score, either from how strongly it is attended while the model
//! re-reads the context after a repeat instruction, or from attention-based
//! baselines. [`eviction`] turns scores into keep-masks under several budget
//! structures, and [`harness`] measures what survives on synthetic retrieval
//! tasks.

pub mod error;
pub mod eviction;
pub mod harness;
pub mod kvcache;
pub mod scoring;
pub mod tensor;
pub mod tinylm;

pub use error::{Error, Result};
