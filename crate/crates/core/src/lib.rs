//! Universal multilingual suggested-reply system: a dual-encoder matching
//! model trained continually across region-locked data shards, with
//! per-language adapters, frequency-penalized response sets, and a
//! penalty-biased inference graph.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod inference;
pub mod model;
pub mod objectives;
pub mod responses;
pub mod synth;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
