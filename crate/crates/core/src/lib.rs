//! Masked-prediction target laboratory.
//!
//! The crate builds every stage of iterative-clustering speech pre-training at
//! desk scale: a synthetic corpus, acoustic features, a small masked-prediction
//! transformer trained with its own autodiff engine, k-means targets, flat and
//! conditional multi-target heads, residual vector quantisation with a pinned
//! first level, weighted-layer-sum probes and the iteration driver.

pub mod config;
pub mod corpus;
pub mod dsp;
pub mod encoder;
pub mod error;
pub mod formats;
pub mod heads;
pub mod kmeans;
pub mod pipeline;
pub mod probes;
pub mod rng;
pub mod rvq;
pub mod targets;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
