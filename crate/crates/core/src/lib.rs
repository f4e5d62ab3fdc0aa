//! Joint mention detection and entity disambiguation.
//!
//! Every token span with at least one candidate entity is scored against its
//! candidates with a context-aware neural model; annotations are produced by
//! thresholded greedy decoding over non-overlapping spans. The crate holds the
//! whole pipeline: a small reverse-mode differentiation kernel, embedding
//! stores, the alias-based candidate index, the encoder and scorers, the
//! max-margin trainer, decoding and evaluation.

pub mod autodiff;
pub mod candidates;
pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod inference;
pub mod model;
pub mod rng;
pub mod scoring;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Parallelism;
pub use tensor::{Scalar, Tensor};
