//! Coarse-to-fine multi-view stereo with point-cloud refinement.
//!
//! The crate reconstructs dense depth from a reference image plus a
//! handful of calibrated neighbor views in two stages:
//!
//! 1. **Coarse prediction** — a plane-sweep cost volume at 1/8
//!    resolution, built from learned image features and a variance
//!    cost metric, regularized by a small 3D convolutional network and
//!    reduced to depth by a probability-weighted average over the
//!    sweep planes ([`coarse`]).
//! 2. **Point refinement** — the coarse depth map is lifted to a
//!    point cloud, each point spawns a short ladder of hypotheses
//!    along the viewing direction of the reference camera, and a graph
//!    network over k-nearest-neighbor edges scores the hypotheses; the
//!    expected offset sharpens the depth, iterating at successively
//!    finer resolutions and narrower spacings ([`pointflow`]).
//!
//! Around that core live the supporting pieces: camera geometry
//! ([`geometry`]), the feature extractor ([`feature`]), training with
//! gradient-checked backpropagation ([`training`], [`autodiff`]),
//! depth-map filtering and fusion into point clouds ([`fusion`]),
//! point-cloud benchmarking ([`evaluation`]), synthetic scene
//! generation for tests and demos ([`synth`]), file formats ([`io`]),
//! and runtime configuration ([`config`]).
//!
//! Everything is deterministic: computations are single-threaded in
//! `f64`, random draws come from seeded ChaCha streams, and reductions
//! run in fixed order, so a given configuration and seed reproduce
//! results bit-for-bit.

pub mod autodiff;
pub mod cli;
pub mod coarse;
pub mod config;
pub mod depth;
pub mod error;
pub mod evaluation;
pub mod feature;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod model;
pub mod pointflow;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
