//! File formats and dataset layout.
//!
//! Everything the pipeline persists goes through this module:
//!
//! * depth and confidence maps as portable float maps ([`pfm`]),
//! * point clouds as binary PLY ([`ply`]),
//! * camera calibrations as line-oriented text files ([`camera`]),
//! * images and region-of-interest masks as PNG ([`image`]),
//! * the on-disk scene layout shared by the generator and the
//!   pipeline ([`dataset`]),
//! * per-run provenance manifests ([`manifest`]).

pub mod camera;
pub mod dataset;
pub mod image;
pub mod manifest;
pub mod pfm;
pub mod ply;
