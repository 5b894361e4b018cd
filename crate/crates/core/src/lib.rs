//! Core library for a multi-stage short-text classifier: a small tensor
//! type with tape-based reverse-mode differentiation, a frozen-encoder
//! transformer front end, clause-level and sentence-level recurrent layers,
//! a pooled softmax head, and the data/metrics/training plumbing around
//! them.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod runconfig;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod text;

pub use error::{Error, Result};
