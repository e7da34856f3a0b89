//! Neighbor-aware classification of informal settlements on a regular grid.
//!
//! The pipeline: per-cell features ([`features`]) on a [`grid`], local 3x3
//! graphs ([`local_graph`]), a two-layer GCN and MLP baselines ([`models`])
//! built on a small dense core ([`linalg`], [`nn`]), and balanced spatial
//! cross-validation with chance-corrected metrics ([`experiment`]). The
//! [`synthetic`] module generates seeded cities with known ground truth.
//!
//! The neural core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the `f64` instantiation the experiments use.

// Negated float comparisons below are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod grid;
pub mod linalg;
pub mod local_graph;
pub mod models;
pub mod nn;
pub mod raster;
pub mod scalar;
pub mod seeds;
pub mod streets;
pub mod synthetic;

pub use error::{Error, Result};
pub use grid::{CellId, CellRecord, FeatureTable, GridSpec, Label};
pub use local_graph::LocalGraph;
pub use scalar::Scalar;

pub type Matrix = linalg::Matrix<f64>;
pub type Matrix32 = linalg::Matrix<f32>;
pub type GcnClassifier = models::GcnClassifier<f64>;
pub type GcnClassifier32 = models::GcnClassifier<f32>;
pub type MlpBaseline = models::MlpBaseline<f64>;
pub type MlpBaseline32 = models::MlpBaseline<f32>;
pub type AdamState = nn::AdamState<f64>;
pub type DenseParams = nn::DenseParams<f64>;
pub type GcnLayerParams = nn::GcnLayerParams<f64>;
