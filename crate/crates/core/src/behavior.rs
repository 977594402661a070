//! Behavioural actions, the feedback controllers that realise them, and the
//! per-vehicle policy interface with the scripted policies.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{ConfigError, EnvError};
use crate::road::{Lane, NeighborTopology, RoadLayout, VehicleId};
use crate::shield::{safe_distance, ShieldConfig};
use crate::vehicle::{slip, steering_for_slip, VehicleGeometry, VehicleLimits, VehicleState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
#[repr(u8)]
pub enum BehaviouralAction {
    Right = 0,
    Left = 1,
    FollowLane = 2,
    SpeedUp = 3,
    SlowDown = 4,
}

impl BehaviouralAction {
    pub const ALL: [BehaviouralAction; 5] = [
        BehaviouralAction::Right,
        BehaviouralAction::Left,
        BehaviouralAction::FollowLane,
        BehaviouralAction::SpeedUp,
        BehaviouralAction::SlowDown,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for BehaviouralAction {
    type Error = EnvError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Self::ALL
            .get(value as usize)
            .copied()
            .ok_or(EnvError::InvalidAction(value))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerGains {
    /// Speed tracking gain (1/s).
    pub k_v: f64,
    /// Lateral offset to lateral speed gain (1/s).
    pub k_y: f64,
    /// Heading error to heading rate gain (1/s).
    pub k_psi: f64,
    /// Speed below which the heading law treats the vehicle as moving at this speed.
    pub v_floor: f64,
    pub lateral_speed_max: f64,
    /// Largest commanded heading magnitude (rad).
    pub heading_max: f64,
    /// Target speed change per speed action (m/s).
    pub speed_step: f64,
}

impl Default for ControllerGains {
    fn default() -> Self {
        Self {
            k_v: 2.0,
            k_y: 2.5,
            k_psi: 5.0,
            v_floor: 1.0,
            lateral_speed_max: 4.0,
            heading_max: 0.2,
            speed_step: 2.0,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, value) in [
            ("k_v", self.k_v),
            ("k_y", self.k_y),
            ("k_psi", self.k_psi),
            ("v_floor", self.v_floor),
            ("lateral_speed_max", self.lateral_speed_max),
            ("heading_max", self.heading_max),
            ("speed_step", self.speed_step),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        if self.heading_max >= std::f64::consts::FRAC_PI_2 {
            return Err(ConfigError::OutOfRange {
                field: "heading_max",
                reason: format!("{} must be below pi/2", self.heading_max),
            });
        }
        Ok(())
    }
}

/// Persistent behavioural references of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub target_lane: Lane,
    pub target_speed: f64,
}

/// Apply an action to the current references.
///
/// Lane actions shift the target lane one step from the current target and
/// are ignored unless the new lane is the vehicle's own lane or reachable
/// from it at `x`.
pub fn decode_action(
    action: BehaviouralAction,
    lane: Lane,
    x: f64,
    current: Intent,
    layout: &RoadLayout,
    gains: &ControllerGains,
    speed_max: f64,
) -> Intent {
    let shift = |next: Option<Lane>| match next {
        Some(l) if l == lane || layout.lanes_connected(lane, l, x) => Intent {
            target_lane: l,
            ..current
        },
        _ => current,
    };
    let speed = |delta: f64| Intent {
        target_speed: (current.target_speed + delta).clamp(0.0, speed_max),
        ..current
    };
    match action {
        BehaviouralAction::Left => shift(current.target_lane.left()),
        BehaviouralAction::Right => shift(current.target_lane.right()),
        BehaviouralAction::FollowLane => current,
        BehaviouralAction::SpeedUp => speed(gains.speed_step),
        BehaviouralAction::SlowDown => speed(-gains.speed_step),
    }
}

pub fn speed_tracking_accel(
    state: &VehicleState,
    target_speed: f64,
    gains: &ControllerGains,
    limits: &VehicleLimits,
) -> f64 {
    (gains.k_v * (target_speed - state.speed)).clamp(limits.a_min, limits.a_max)
}

/// Cascaded lateral controller: offset to lateral speed, lateral speed to
/// heading, heading error to the steering that produces the required
/// heading rate in one step.
pub fn lane_keep_steering(
    state: &VehicleState,
    target_y: f64,
    geometry: &VehicleGeometry,
    limits: &VehicleLimits,
    gains: &ControllerGains,
) -> f64 {
    let v_eff = state.speed.max(gains.v_floor);
    let vy_des = (gains.k_y * (target_y - state.y))
        .clamp(-gains.lateral_speed_max, gains.lateral_speed_max);
    let heading_des = (vy_des / v_eff)
        .clamp(-1.0, 1.0)
        .asin()
        .clamp(-gains.heading_max, gains.heading_max);
    let error = heading_des - state.psi;
    let rate = gains.k_psi * error;
    // Slip also turns the course, so at low speed the rate law alone would
    // swing the course past the desired heading; capping slip at the heading
    // error keeps the course psi + beta between psi and the desired heading.
    let sin_max = slip(limits.steering_max).sin().min(error.abs().sin());
    let sin_beta = (rate * geometry.length / (2.0 * v_eff)).clamp(-sin_max, sin_max);
    steering_for_slip(sin_beta.asin()).clamp(-limits.steering_max, limits.steering_max)
}

/// Everything a policy may look at when choosing an action.
#[derive(Debug, Clone)]
pub struct PolicyView<'a> {
    pub id: VehicleId,
    pub observation: Observation,
    pub state: VehicleState,
    pub lane: Lane,
    pub intent: Intent,
    pub in_merge_section: bool,
    /// Neighbours in the other lane, present when that lane is reachable.
    pub merge_topology: Option<NeighborTopology>,
    pub shield: &'a ShieldConfig,
}

/// Per-vehicle decision maker, invoked once per behavioural tick.
pub trait Policy: Send {
    fn act(&mut self, view: &PolicyView<'_>) -> BehaviouralAction;
}

pub struct RandomPolicy {
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(seed: u64, vehicle: VehicleId) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(vehicle));
        Self { rng }
    }
}

impl Policy for RandomPolicy {
    fn act(&mut self, _view: &PolicyView<'_>) -> BehaviouralAction {
        BehaviouralAction::ALL[self.rng.random_range(0..BehaviouralAction::ALL.len())]
    }
}

pub struct KeepLaneCruise;

impl Policy for KeepLaneCruise {
    fn act(&mut self, _view: &PolicyView<'_>) -> BehaviouralAction {
        BehaviouralAction::FollowLane
    }
}

/// Merges as soon as the merge section is reached and otherwise pushes speed
/// on the highway, ignoring every gap.
pub struct AggressiveMerger;

impl Policy for AggressiveMerger {
    fn act(&mut self, view: &PolicyView<'_>) -> BehaviouralAction {
        match view.lane {
            Lane::Ramp if view.in_merge_section => BehaviouralAction::Left,
            Lane::Ramp => BehaviouralAction::FollowLane,
            Lane::Highway => BehaviouralAction::SpeedUp,
        }
    }
}

/// Merges only into gaps at least twice the safe distance on both sides.
pub struct ShyMerger;

impl ShyMerger {
    pub fn gaps_accept(state: &VehicleState, topology: &NeighborTopology, shield: &ShieldConfig) -> bool {
        let front_ok = topology.target_leading.is_none_or(|n| {
            n.gap > 2.0 * safe_distance(state.speed, shield).x_safe
        });
        let rear_ok = topology.target_rear.is_none_or(|n| {
            n.gap > 2.0 * safe_distance(n.state.speed, shield).x_safe
        });
        front_ok && rear_ok
    }
}

impl Policy for ShyMerger {
    fn act(&mut self, view: &PolicyView<'_>) -> BehaviouralAction {
        if view.lane != Lane::Ramp || !view.in_merge_section {
            return BehaviouralAction::FollowLane;
        }
        match &view.merge_topology {
            Some(t) if Self::gaps_accept(&view.state, t, view.shield) => BehaviouralAction::Left,
            _ => BehaviouralAction::FollowLane,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Random,
    KeepLaneCruise,
    AggressiveMerger,
    ShyMerger,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 4] = [
        PolicyKind::Random,
        PolicyKind::KeepLaneCruise,
        PolicyKind::AggressiveMerger,
        PolicyKind::ShyMerger,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Random => "random",
            PolicyKind::KeepLaneCruise => "keep_lane_cruise",
            PolicyKind::AggressiveMerger => "aggressive_merger",
            PolicyKind::ShyMerger => "shy_merger",
        }
    }

    /// Fresh policy for one vehicle; stochastic policies draw from a stream
    /// keyed by `(seed, vehicle)`.
    pub fn build(self, seed: u64, vehicle: VehicleId) -> Box<dyn Policy> {
        match self {
            PolicyKind::Random => Box::new(RandomPolicy::new(seed, vehicle)),
            PolicyKind::KeepLaneCruise => Box::new(KeepLaneCruise),
            PolicyKind::AggressiveMerger => Box::new(AggressiveMerger),
            PolicyKind::ShyMerger => Box::new(ShyMerger),
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::Unknown {
                kind: "policy",
                name: s.to_owned(),
            })
    }
}

pub fn scripted_policies() -> [PolicyKind; 4] {
    PolicyKind::ALL
}
