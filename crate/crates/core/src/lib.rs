//! Recursive B-spline state estimation for LiDAR-only and LiDAR-inertial
//! odometry, with a synthetic data generator and trajectory evaluation.
//!
//! The filter state is a sliding window of cubic B-spline control points
//! (positions and cumulative orientation increments, optionally IMU biases).
//! Each measurement is evaluated at its own timestamp on the spline, so
//! LiDAR points need no de-skewing.

pub mod config;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod imu;
pub mod io;
pub mod lidar;
pub mod runner;
pub mod simulator;
pub mod so3;
pub mod spline;

pub use config::{Mode, RunConfig};
pub use error::{Error, Result};
pub use estimator::{Gaussian, MeasurementModel, ProcessNoise, RecursiveSplineEstimator, SplineState, UpdateSettings};
pub use eval::{evaluate_ape, Alignment, Pose, Trajectory};
pub use imu::{GravityVector, ImuSample};
pub use lidar::{Extrinsics, LidarPoint, LocalMap};
pub use runner::{run_odometry, RunReport, Streams};
pub use so3::{RotVec, UnitQuaternion};
pub use spline::{ControlPointSpline, Derivative, KnotGrid};
