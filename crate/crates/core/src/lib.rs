//! Node-feature convolution for graph convolutional networks (NFC-GCN).
//!
//! Each node's feature vector is stacked with those of a fixed number of
//! sampled neighbors into a `D × n` map, convolved and flattened into a
//! first-level representation, which standard graph convolution layers then
//! refine for semi-supervised node classification.
//!
//! Numeric code is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the scalar to `f64`, which the gradient checks assume.

pub mod dataset;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod ops;
pub mod preset;
pub mod sampling;
pub mod scalar;
pub mod sparse;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

pub type Graph = graph::Graph<f64>;
pub type Graph32 = graph::Graph<f32>;
pub type CsrMatrix = sparse::CsrMatrix<f64>;
pub type ModelParams = model::ModelParams<f64>;
pub type ModelParams32 = model::ModelParams<f32>;
pub type GraphInputs = model::GraphInputs<f64>;
pub type RunResult = trainer::RunResult<f64>;
pub type Checkpoint = model::Checkpoint<f64>;
