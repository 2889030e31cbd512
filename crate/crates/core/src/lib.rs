//! Structured pruning of sequential dense/conv networks by greedy maximization of
//! the reweighted input-change objective.

pub mod budget;
pub mod bundle;
pub mod error;
pub mod greedy;
pub mod linalg;
pub mod multilayer;
pub mod netexec;
pub mod objective;
pub mod pipeline;
pub mod synth;
pub mod verify;

pub use error::{Error, Result};
pub use linalg::Matrix;
