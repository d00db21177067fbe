pub mod attention;
pub mod config;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod losses;
pub mod model;
pub mod retrieval;
pub mod sketch;
pub mod synth;
pub mod tensor;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
