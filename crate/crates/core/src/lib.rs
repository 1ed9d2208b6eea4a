//! Online-learned correction of wheel-inertial odometry for skid-steer
//! robots.
//!
//! A kinematic [`simulator`] supplies sensor streams and ground truth, a
//! small attention-based convolutional [`network`] learns per-step pose
//! increments while data stream in ([`training`]), and [`metrics`] compare
//! it against an [`ekf`] baseline and a feed-forward network.

pub mod autodiff;
pub mod cli_io;
pub mod ekf;
pub mod error;
pub mod metrics;
pub mod network;
pub mod se2;
pub mod simulator;
pub mod training;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    window_from_stream, wrap_angle, LogMeta, Measurement, MeasurementWindow, Pose2D, RelativePose, ScenarioKind,
    TrajectoryLog,
};
