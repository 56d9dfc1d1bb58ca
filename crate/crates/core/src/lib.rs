//! Transformer encoder with routed expert-head attention.
//!
//! The crate covers the whole compression pipeline: a baseline encoder,
//! conversion of its attention layers into routed expert heads with a shared
//! expander, progressive two-stage training with a load-balancing objective,
//! usage-driven pruning into router-free layers, checkpointing, and analytic
//! parameter/FLOP accounting plus a throughput benchmark.

pub mod accounting;
pub mod data;
pub mod encoder;
pub mod error;
pub mod expert;
pub mod model_io;
pub mod nn;
pub mod numkit;
pub mod pruning;
pub mod selfcheck;
pub mod training;
pub mod usage;

pub use error::{Error, Result};
