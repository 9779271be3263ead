//! Point-line-plane RGB-D SLAM for indoor scenes dominated by three
//! orthogonal directions, with planar meshing of the resulting map.

// Negated comparisons reject NaN on purpose; axis loops index matrix columns.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod evaluation;
pub mod features;
pub mod geometry;
pub mod io;
pub mod manhattan;
pub mod mapping;
pub mod meshing;
pub mod sensor;
pub mod system;
pub mod tracking;

pub use nalgebra;

pub use config::Config;
pub use evaluation::Trajectory;
pub use features::FrameFeatures;
pub use geometry::{CameraIntrinsics, ManhattanFrame, PlaneHessian, Pose};
pub use mapping::{KeyframeId, LandmarkId, SparseMap};
pub use meshing::PlanarMesh;
pub use sensor::RgbdFrame;
pub use system::{FrameLog, FrameStatus, Slam, SlamError};
