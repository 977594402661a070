//! Kinematic bicycle model.
//!
//! The state carries position, the velocity vector and the body heading.
//! Speed is the primary integrated quantity; the velocity components are
//! re-derived every step from the speed and the course angle (heading plus
//! slip). Positions advance with the post-update speed along the course held
//! at the start of the step, which is exactly the one-step prediction the
//! safety shield uses.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::error::KinematicsError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v_x: f64,
    pub v_y: f64,
    /// Heading relative to the road axis.
    pub psi: f64,
    pub speed: f64,
}

impl VehicleState {
    pub fn new(x: f64, y: f64, v_x: f64, v_y: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            v_x,
            v_y,
            psi,
            speed: v_x.hypot(v_y),
        }
    }

    /// State travelling along its heading at `speed`.
    pub fn along_heading(x: f64, y: f64, speed: f64, psi: f64) -> Self {
        Self {
            x,
            y,
            v_x: speed * psi.cos(),
            v_y: speed * psi.sin(),
            psi,
            speed,
        }
    }

    /// Direction of travel. Falls back to the heading when stationary.
    pub fn course(&self) -> f64 {
        if self.speed > 0.0 {
            self.v_y.atan2(self.v_x)
        } else {
            self.psi
        }
    }

    /// Projection of the direction of travel onto the road axis, never negative.
    pub fn longitudinal_factor(&self) -> f64 {
        self.course().cos().max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub accel: f64,
    pub steering: f64,
}

impl ControlInput {
    pub fn new(accel: f64, steering: f64) -> Self {
        Self { accel, steering }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleGeometry {
    pub length: f64,
    pub width: f64,
}

impl Default for VehicleGeometry {
    fn default() -> Self {
        Self {
            length: 5.0,
            width: 2.0,
        }
    }
}

/// Actuation and speed limits shared by every vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VehicleLimits {
    pub a_min: f64,
    pub a_max: f64,
    pub steering_max: f64,
    pub speed_max: f64,
}

impl Default for VehicleLimits {
    fn default() -> Self {
        Self {
            a_min: -5.0,
            a_max: 5.0,
            steering_max: std::f64::consts::FRAC_PI_4,
            speed_max: 40.0,
        }
    }
}

impl VehicleLimits {
    pub fn clamp(&self, control: ControlInput) -> ControlInput {
        ControlInput {
            accel: control.accel.clamp(self.a_min, self.a_max),
            steering: control
                .steering
                .clamp(-self.steering_max, self.steering_max),
        }
    }
}

/// Slip angle at the centre of gravity, `atan(tan(steering) / 2)`.
pub fn slip_angle(steering: f64) -> Result<f64, KinematicsError> {
    if !(steering.abs() < FRAC_PI_2) {
        return Err(KinematicsError::SteeringDomain(steering));
    }
    Ok(slip(steering))
}

#[inline]
pub(crate) fn slip(steering: f64) -> f64 {
    (0.5 * steering.tan()).atan()
}

/// Steering angle producing the given slip angle.
#[inline]
pub(crate) fn steering_for_slip(beta: f64) -> f64 {
    (2.0 * beta.tan()).atan()
}

/// Advance one Euler step.
///
/// The control is clamped to `limits` (steering) and the resulting speed to
/// `[0, limits.speed_max]`.
pub fn step_kinematics(
    state: &VehicleState,
    control: ControlInput,
    geometry: &VehicleGeometry,
    limits: &VehicleLimits,
    dt: f64,
) -> VehicleState {
    let steering = control
        .steering
        .clamp(-limits.steering_max, limits.steering_max);
    let beta = slip(steering);
    let course = state.course();

    let speed = (state.speed + control.accel * dt).clamp(0.0, limits.speed_max);
    let x = state.x + speed * course.cos() * dt;
    let y = state.y + speed * course.sin() * dt;
    let psi = state.psi + (2.0 * state.speed / geometry.length) * beta.sin() * dt;
    let next_course = psi + beta;

    VehicleState {
        x,
        y,
        v_x: speed * next_course.cos(),
        v_y: speed * next_course.sin(),
        psi,
        speed,
    }
}

/// Reachable speed range after one step, intersected with `[0, speed_max]`.
pub fn velocity_bounds(
    current_speed: f64,
    a_min: f64,
    a_max: f64,
    dt: f64,
    speed_max: f64,
) -> (f64, f64) {
    let lo = (current_speed + a_min * dt).clamp(0.0, speed_max);
    let hi = (current_speed + a_max * dt).clamp(0.0, speed_max);
    (lo, hi)
}
