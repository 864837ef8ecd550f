//! Self-supervised image representation learning with a learned local affinity.
//!
//! Two global and two local crops are taken from each image. Global crops are
//! pulled together, local crops are pulled toward the globals, and a small
//! regressor network measures how related two local crops are so the encoder
//! can push apart local crops that the regressor finds too easy to match.

pub mod affinity;
pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
