//! Light-field view synthesis with multi-plane images.
//!
//! A sparse set of calibrated views is swept into plane-sweep volumes, a
//! small 3D U-Net applied recurrently with shared weights refines an alpha
//! volume from visibility-weighted color statistics, colors are assigned from
//! the refined geometry, and novel views are rendered by homography warping
//! and back-to-front compositing.

pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod neural;
pub mod real;
pub mod refiner;
pub mod render;
pub mod tensor;
pub mod training;
pub mod warp;

pub use error::{Error, Result};
pub use geometry::{
    average_reference_camera, homography_at_depth, make_depth_planes, plane_homography,
    project_point, unproject, CameraRecord, DepthPlanes, Homography, PinholeCamera,
};
pub use real::Real;
pub use tensor::{Dims, Image, Volume};
pub use warp::{ImageStack, PsvStack, RigWarps, ViewVolumeStack};
