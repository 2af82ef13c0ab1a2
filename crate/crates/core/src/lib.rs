//! Calibration toolkit for skid-steer mobile robots.
//!
//! The crate gathers training data with a randomized, uniformly sampled
//! protocol over the wheel-speed input space, identifies a first-order plus
//! dead-time powertrain for each side, and learns a per-dimension slip model
//! by Bayesian linear regression with a Normal-Inverse-Gamma posterior.
//! Predictions are rolled out over a horizon and scored with the mean root
//! masked squared error of the pose.
//!
//! A deterministic simulator with configurable slip plays the role of the
//! robot, so every learning claim can be checked against known ground truth.
//!
//! ```
//! use drive_core::model::{diff_drive_body_velocity, RobotGeometry, WheelSpeeds};
//!
//! let geom = RobotGeometry::new(0.3, 0.6).unwrap();
//! let f = diff_drive_body_velocity(&geom, WheelSpeeds::new(-2.0, 2.0));
//! assert!((f.omega_rad_s - 2.0).abs() < 1e-12);
//! ```

pub mod error;
pub mod evaluation;
pub mod io;
pub mod model;
pub mod powertrain;
pub mod protocol;
pub mod sim;
pub mod slip;
mod stats;
pub mod training;

pub use error::{Error, Result};
