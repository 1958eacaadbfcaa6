//! Multi-frame stereo scene flow.
//!
//! Per frame of a rectified stereo sequence the engine estimates a dense
//! disparity map, a dense optical flow map, the 6-DOF camera motion and a
//! binary moving-object mask. The stages run in a fixed order: binocular
//! SGM stereo, direct visual odometry, epipolar (multi-frame) stereo
//! refinement, graph-cut motion segmentation, masked SGM optical flow, and a
//! graph-cut fusion of rigid and non-rigid flow.

pub mod edges;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod geometry;
pub mod grid;
pub mod matching;
pub mod maxflow;
pub mod odometry;
pub mod pipeline;
pub mod segmentation;
pub mod sgm;
pub mod stereo;
pub mod synthetic;

pub use error::{Error, Result};
pub use geometry::{Intrinsics, Pose, StereoRig};
pub use grid::{ColorImage, GrayImage, Grid, MaskMap, ScalarMap, VectorMap};
