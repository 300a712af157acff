//! Access-controlled continual learning with per-partition low-rank adapters.
//!
//! A frozen byte-level base language model is shared by many small adapters,
//! one per access-controlled data partition. Queries are routed to the most
//! relevant adapters the caller may use, and removing a document retrains
//! only the adapter whose partition held it.

mod clock;
pub mod codec;
pub mod error;
pub mod eval;
mod fsutil;
pub mod lm;
pub mod lora;
pub mod registry;
pub mod retriever;
pub mod tensor;

pub use error::{Error, Result};
