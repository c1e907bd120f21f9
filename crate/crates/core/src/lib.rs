//! Scenario-aware evaluation of multimodal trajectory predictors.
//!
//! Predictions are scored by a criticality-weighted blend of a mixture-area
//! diversity measure and displacement error, and the scores are checked
//! against closed-loop driving performance from a small built-in simulator.

// `!(x > y)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod domain;
pub mod error;
pub mod fusion;
pub mod geom;
pub mod gmm;
pub mod io;
pub mod metrics;
pub mod scalar;
pub mod scenarionn;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Working-precision aliases used by the simulator and the pipeline.
pub type Point = geom::Point2<f64>;
pub type Trajectory = domain::Trajectory<f64>;
pub type PredictionSet = domain::PredictionSet<f64>;
pub type Gmm2D = gmm::Gmm2D<f64>;
pub type Cov2 = gmm::Cov2<f64>;

/// Single-precision variants of the numerical types.
pub type PointF32 = geom::Point2<f32>;
pub type TrajectoryF32 = domain::Trajectory<f32>;
pub type PredictionSetF32 = domain::PredictionSet<f32>;
pub type Gmm2DF32 = gmm::Gmm2D<f32>;
pub type Cov2F32 = gmm::Cov2<f32>;
