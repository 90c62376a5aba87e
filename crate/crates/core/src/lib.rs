//! Metric-semantic terrain mesh reconstruction from an image domain and sparse depth.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod camera;
pub mod error;
pub mod features;
pub mod geom;
pub mod init;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod merge;
pub mod mesh;
pub mod raster;
pub mod refine;
pub mod render;
pub mod scalar;
pub mod sparse;
pub mod spatial;
pub mod synth;

pub use camera::{CameraModel, Pose};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use mesh::{GridTopology, TriMesh};
pub use raster::Raster;
pub use scalar::Real;
pub use sparse::{SparseDepth, SparseDepthSet};

pub type Mesh32 = TriMesh<f32>;
pub type Mesh64 = TriMesh<f64>;
pub type Camera32 = CameraModel<f32>;
pub type Camera64 = CameraModel<f64>;
pub type Raster32 = Raster<f32>;
pub type Raster64 = Raster<f64>;
