//! Surfel mapping with plane priors, query-based panoptic segmentation and a
//! tile rasterizer.
//!
//! The pipeline: fit a self-organizing Gaussian mixture to a point cloud
//! ([`sogmm`]), seed 2D Gaussian surfels from it, render them with the tile
//! rasterizer ([`raster`]), assign surfels to instance queries ([`panoptic`]),
//! and optimize everything jointly ([`losses`], [`trainer`]). [`eval`] holds
//! the metrics and synthetic scenes, [`io`] the file formats.

pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod numeric;
pub mod panoptic;
pub mod raster;
pub mod sogmm;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use types::{Camera, FrameBundle, InstanceMask, Plane, PointCloud, SceneMap, Surfel};
