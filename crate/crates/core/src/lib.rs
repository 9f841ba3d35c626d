//! Few-shot voxel radiance fields with multi-scale, reprojection-guided depth
//! self-supervision.

pub mod adapt;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod poses;
pub mod raster;
pub mod render;
pub mod train;

pub use error::{FrugalError, Result};
