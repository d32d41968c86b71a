//! Matching-free depth recovery for monocular structured-light rigs.
//!
//! A density voxel grid laid out in normalized device coordinates is fitted
//! to a set of captures by differentiable volume rendering. Sample colors
//! come straight from the known projected patterns, so only geometry is
//! optimized. A capture simulator with exact ground truth drives the tests.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod patterns;
pub mod raster;
pub mod renderer;
pub mod simulator;
pub mod trainer;

pub use error::{Error, Result};
