//! Multi-view stereo depth estimation built from two-view plane-sweep
//! stereo networks, geometric-consistency refinement and order-invariant
//! attentional aggregation, with synthetic data generation, training,
//! evaluation metrics and point cloud fusion.
//!
//! Core math is generic over the scalar type ([`Scalar`]): `f32` for
//! training throughput, `f64` for the finite-difference gradient checks.
//!
//! Tensor layout conventions:
//! - images and feature maps: `[channels, height, width]`
//! - cost volumes: `[channels, planes, height, width]`
//! - probability volumes: `[planes, height, width]`
//! - disparity maps: `[height, width]`

pub mod autodiff;
pub mod colormap;
pub mod error;
pub mod checkpoint;
pub mod dataset;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod linalg;
pub mod fusion;
pub mod maps;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod sampling;
pub mod scalar;
pub mod selftest;
pub mod sweep;
pub mod synth;
pub mod train;
pub mod volumes;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision camera, the training default.
pub type CameraModel32 = geometry::CameraModel<f32>;
/// Double-precision camera, used by the gradient-check suites.
pub type CameraModel64 = geometry::CameraModel<f64>;
pub type DisparityMap32 = maps::DisparityMap<f32>;
pub type DisparityMap64 = maps::DisparityMap<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type MvsModel32 = net::MvsModel<f32>;
pub type MvsModel64 = net::MvsModel<f64>;
pub type MVSample32 = dataset::MVSample<f32>;
