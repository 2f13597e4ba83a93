//! Deformable Gaussian-splatting pipeline for driving-style scenes.
//!
//! The crate covers the full loop: SfM ingestion, a differentiable CPU splat
//! rasterizer, a deformation field with enhancement modules, grouped joint
//! training, a neural pose adaptor bridging two world coordinate systems, and
//! automatic 2D/3D annotation generation for novel rendered views.

pub mod adaptor;
pub mod cli;
pub mod deform;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod nn;
pub mod render;
pub mod scene;
pub mod trainer;

pub use geometry::{CameraView, Intrinsics, PixelPoint, Pose, Similarity};
