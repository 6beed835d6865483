//! Sparse scene flow estimation from monocular RGB images and point clouds.
//!
//! The pipeline extracts graph-convolution features from each point cloud and
//! a strided convolutional pyramid from each image, fuses both per point,
//! matches the two frames with entropy-regularized optimal transport, and
//! refines the resulting flow with a residual graph network. Everything is
//! trainable end to end through the crate's own reverse-mode tape.

pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod image_features;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ot;
pub mod point_features;
pub mod refine;
pub mod training;

pub use error::{FlowError, Result};
