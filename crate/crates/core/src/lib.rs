//! Lidar-only odometry: each incoming scan is registered independently
//! against several previous keyframes and the resulting relative-pose
//! constraints are smoothed by a sliding-window pose-graph optimization.
//!
//! The crate splits into the math and data layers ([`se3`], [`pointcloud`],
//! [`spatial`]), the two estimators ([`icp`] for pairwise registration,
//! [`graph`] for the window smoother), the [`pipeline`] that orchestrates
//! them per frame, and the supporting [`io`], [`sim`] and [`metrics`]
//! modules for datasets, synthetic ground truth and evaluation.

pub mod graph;
pub mod icp;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod pointcloud;
pub mod se3;
pub mod sim;
pub mod spatial;

pub use graph::{NodeId, PoseGraph};
pub use pipeline::{FrameResult, OdometryPipeline, PipelineConfig};
pub use pointcloud::{DownsampledScan, RawScan};
pub use se3::{Pose, Twist};
