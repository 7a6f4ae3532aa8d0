//! Multi-view semantic label fusion for registered RGB-D sequences.
//!
//! Predictions from neighboring views are inverse-warped into each target
//! view through depth and pose, masked for occlusions and label boundaries,
//! and merged into pseudo-labels. The same machinery drives a consistency
//! loss for semi-supervised training, demonstrated with a linear toy model
//! on analytically rendered scenes.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the `*32` and
//! `*64` aliases below fix the scalar.

pub mod frameio;
pub mod fusion;
pub mod geometry;
pub mod gradchecks;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod raster;
pub mod scalar;
pub mod synth;
pub mod toytrain;
pub mod warp;

pub use scalar::Real;

pub type Frame32 = frameio::Frame<f32>;
pub type Frame64 = frameio::Frame<f64>;
pub type ProbMap32 = frameio::ProbMap<f32>;
pub type ProbMap64 = frameio::ProbMap<f64>;
pub type SceneSequence32 = frameio::SceneSequence<f32>;
pub type SceneSequence64 = frameio::SceneSequence<f64>;
pub type Intrinsics32 = geometry::Intrinsics<f32>;
pub type Intrinsics64 = geometry::Intrinsics<f64>;
pub type RigidTransform32 = geometry::RigidTransform<f32>;
pub type RigidTransform64 = geometry::RigidTransform<f64>;
pub type Field32 = raster::Field<f32>;
pub type Field64 = raster::Field<f64>;
pub type ToyModel32 = toytrain::ToyModel<f32>;
pub type ToyModel64 = toytrain::ToyModel<f64>;
