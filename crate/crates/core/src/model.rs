//! Planar skid-steer kinematics.
//!
//! The robot pose lives in the world frame, body velocities in the robot
//! frame. A commanded body velocity comes from the ideal differential-drive
//! map of the wheel speeds; the realized body velocity is the commanded one
//! minus the slip velocity.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let a = angle.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

/// Wheel (or track sprocket) radius and track width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobotGeometry {
    pub wheel_radius_m: f64,
    pub track_width_m: f64,
}

impl RobotGeometry {
    pub fn new(wheel_radius_m: f64, track_width_m: f64) -> Result<Self> {
        let geom = Self {
            wheel_radius_m,
            track_width_m,
        };
        geom.validate()?;
        Ok(geom)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.wheel_radius_m > 0.0 && self.wheel_radius_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "wheel radius must be positive, got {}",
                self.wheel_radius_m
            )));
        }
        if !(self.track_width_m > 0.0 && self.track_width_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "track width must be positive, got {}",
                self.track_width_m
            )));
        }
        Ok(())
    }
}

impl Default for RobotGeometry {
    /// A 0.3 m wheel on a 1.08 m track, roughly a large skid-steer UGV.
    fn default() -> Self {
        Self {
            wheel_radius_m: 0.3,
            track_width_m: 1.08,
        }
    }
}

/// Pose in the world frame. The yaw is kept in `(-π, π]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarState {
    pub x_m: f64,
    pub y_m: f64,
    pub yaw_rad: f64,
}

impl PlanarState {
    pub fn new(x_m: f64, y_m: f64, yaw_rad: f64) -> Self {
        Self {
            x_m,
            y_m,
            yaw_rad: wrap_angle(yaw_rad),
        }
    }
}

/// Left and right wheel angular velocities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WheelSpeeds {
    pub left_rad_s: f64,
    pub right_rad_s: f64,
}

impl WheelSpeeds {
    pub fn new(left_rad_s: f64, right_rad_s: f64) -> Self {
        Self {
            left_rad_s,
            right_rad_s,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.left_rad_s.is_finite() && self.right_rad_s.is_finite()
    }
}

/// Translational and rotational velocity expressed in the robot frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BodyVelocity {
    pub vx_m_s: f64,
    pub vy_m_s: f64,
    pub omega_rad_s: f64,
}

impl BodyVelocity {
    pub fn new(vx_m_s: f64, vy_m_s: f64, omega_rad_s: f64) -> Self {
        Self {
            vx_m_s,
            vy_m_s,
            omega_rad_s,
        }
    }
}

/// Difference between commanded and realized body velocity.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SlipVelocity {
    pub gx_m_s: f64,
    pub gy_m_s: f64,
    pub gomega_rad_s: f64,
}

impl SlipVelocity {
    pub fn new(gx_m_s: f64, gy_m_s: f64, gomega_rad_s: f64) -> Self {
        Self {
            gx_m_s,
            gy_m_s,
            gomega_rad_s,
        }
    }
}

impl Sub<SlipVelocity> for BodyVelocity {
    type Output = BodyVelocity;

    fn sub(self, slip: SlipVelocity) -> BodyVelocity {
        BodyVelocity {
            vx_m_s: self.vx_m_s - slip.gx_m_s,
            vy_m_s: self.vy_m_s - slip.gy_m_s,
            omega_rad_s: self.omega_rad_s - slip.gomega_rad_s,
        }
    }
}

impl Add for WheelSpeeds {
    type Output = WheelSpeeds;

    fn add(self, rhs: WheelSpeeds) -> WheelSpeeds {
        WheelSpeeds::new(
            self.left_rad_s + rhs.left_rad_s,
            self.right_rad_s + rhs.right_rad_s,
        )
    }
}

/// Ideal differential-drive body velocity of a pair of wheel speeds.
///
/// `f_x = r (ω_l + ω_r) / 2`, `f_y = 0`, `f_ω = r (ω_r − ω_l) / b`.
pub fn diff_drive_body_velocity(geom: &RobotGeometry, wheels: WheelSpeeds) -> BodyVelocity {
    let r = geom.wheel_radius_m;
    BodyVelocity {
        vx_m_s: r * (wheels.left_rad_s + wheels.right_rad_s) / 2.0,
        vy_m_s: 0.0,
        omega_rad_s: r * (wheels.right_rad_s - wheels.left_rad_s) / geom.track_width_m,
    }
}

/// One explicit Euler step of the planar pose under a body velocity.
pub fn propagate_state(state: PlanarState, v: BodyVelocity, dt: f64) -> PlanarState {
    let (sin, cos) = state.yaw_rad.sin_cos();
    PlanarState {
        x_m: state.x_m + (cos * v.vx_m_s - sin * v.vy_m_s) * dt,
        y_m: state.y_m + (sin * v.vx_m_s + cos * v.vy_m_s) * dt,
        yaw_rad: wrap_angle(state.yaw_rad + v.omega_rad_s * dt),
    }
}

/// Slip observed when `measured` was realized under a `commanded` body velocity.
pub fn observed_slip(commanded: BodyVelocity, measured: BodyVelocity) -> SlipVelocity {
    SlipVelocity {
        gx_m_s: commanded.vx_m_s - measured.vx_m_s,
        gy_m_s: commanded.vy_m_s - measured.vy_m_s,
        gomega_rad_s: commanded.omega_rad_s - measured.omega_rad_s,
    }
}

/// Finite-difference body velocity between two consecutive poses, expressed
/// in the body frame of `prev`. Inverse of [`propagate_state`].
pub fn body_velocity_from_poses(
    prev: PlanarState,
    next: PlanarState,
    dt: f64,
) -> Result<BodyVelocity> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let dx = next.x_m - prev.x_m;
    let dy = next.y_m - prev.y_m;
    let (sin, cos) = prev.yaw_rad.sin_cos();
    Ok(BodyVelocity {
        vx_m_s: (cos * dx + sin * dy) / dt,
        vy_m_s: (-sin * dx + cos * dy) / dt,
        omega_rad_s: wrap_angle(next.yaw_rad - prev.yaw_rad) / dt,
    })
}
