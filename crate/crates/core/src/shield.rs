//! Hybrid safety shield.
//!
//! Longitudinal control is filtered through a one-dimensional QP over the
//! ego speed correction `v_cbf`, one row per relevant leader:
//!
//! ```text
//! h(x)      = gap - (tau * v + x_buff)
//! condition   h(x') - floor >= (1 - eta) * (h(x) - floor)
//! ```
//!
//! where the next state uses the candidate ego speed `v' = v_ll + v_cbf`
//! and the leader at its worst-case acceleration. Positions advance with the
//! post-step speed along the course held at the start of the step, so the
//! prediction matches the integrator exactly. The condition keeps
//! `h >= floor` forward invariant.
//!
//! Lane changes are gated by the same condition against the target-lane
//! leader (ego speed in `x_safe`) and the target-lane follower (its own speed
//! in `x_safe`, worst-case acceleration upward).
//!
//! The condition alone is not control invariant under bounded braking: a
//! fast follower closing on a slow leader can reach states where even full
//! braking loses more than `eta * h` per step. Each leader row is therefore
//! paired with a viability row capping the next speed so that the
//! continuation with both vehicles braking fully still meets the condition
//! at every step. Lane changes additionally require both target-lane pairs
//! to be viable.
//!
//! Leaders in other lanes are constrained while laterally within the
//! corridor, now or after `lateral_horizon` at the current lateral speeds.
//! Such pairs stay bound until clear of the corridor by `release_margin`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::qp::{solve_shield_qp, AffineConstraint, QpStatus, ShieldQp};
use crate::road::{
    ahead_neighbor, identify_neighbors, nearest_ahead, Lane, Neighbor, NeighborTopology,
    RoadLayout, RoadUser, VehicleId,
};
use crate::vehicle::{velocity_bounds, ControlInput, VehicleLimits, VehicleState};

/// Absorbs floating-point rounding between the QP and the integrator.
const ROUNDING_MARGIN: f64 = 1e-9;
const CORRECTION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShieldConfig {
    /// Safe time headway (s).
    pub tau: f64,
    /// Zero-order coefficient of the discrete barrier condition, in `(0, 1]`.
    pub eta: f64,
    pub slack_penalty: f64,
    /// Motion-planning step (s).
    pub dt: f64,
    /// Assumed acceleration of observed vehicles ahead.
    pub worst_case_leader_accel: f64,
    /// Assumed acceleration of the observed vehicle behind in the target lane.
    pub worst_case_follower_accel: f64,
    /// Hard lower bound on every barrier value (m).
    pub headway_floor: f64,
    /// Lateral clearance beyond the half-widths within which a vehicle in
    /// another lane counts as a leader (m).
    pub corridor_margin: f64,
    /// Horizon over which lateral motion is extrapolated when testing the
    /// corridor (s).
    pub lateral_horizon: f64,
    /// Extra lateral clearance beyond the corridor needed to release a bound
    /// pair (m).
    pub release_margin: f64,
    /// Largest course angle assumed for a braking leader when judging
    /// viability; bounds how little of its speed is along the road (rad).
    pub course_bound: f64,
    /// Longitudinal reach of the shield's neighbour search (m). Connected
    /// vehicles share state beyond the observation range; this must cover
    /// the braking envelope at `speed_max` so a stopped vehicle is never
    /// first met in a state no control can recover.
    pub sensing_range: f64,
    pub limits: VehicleLimits,
}

impl Default for ShieldConfig {
    fn default() -> Self {
        let limits = VehicleLimits::default();
        Self {
            tau: 0.5,
            eta: 0.0325,
            slack_penalty: 1e4,
            dt: 1.0 / 15.0,
            worst_case_leader_accel: limits.a_min,
            worst_case_follower_accel: limits.a_max,
            headway_floor: 0.001,
            corridor_margin: 1.0,
            lateral_horizon: 0.5,
            release_margin: 0.25,
            course_bound: 0.5,
            sensing_range: 300.0,
            limits,
        }
    }
}

fn positive(field: &'static str, value: f64) -> Result<(), ConfigError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::NonPositive { field, value })
    }
}

fn out_of_range(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::OutOfRange {
        field,
        reason: reason.into(),
    }
}

impl ShieldConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        positive("tau", self.tau)?;
        positive("dt", self.dt)?;
        positive("slack_penalty", self.slack_penalty)?;
        positive("speed_max", self.limits.speed_max)?;
        positive("sensing_range", self.sensing_range)?;
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(out_of_range("eta", format!("{} not in (0, 1]", self.eta)));
        }
        let l = &self.limits;
        if !(l.a_min < 0.0 && l.a_max > 0.0 && l.a_min.is_finite() && l.a_max.is_finite()) {
            return Err(out_of_range(
                "limits",
                format!("need a_min < 0 < a_max, got [{}, {}]", l.a_min, l.a_max),
            ));
        }
        if !(l.steering_max > 0.0 && l.steering_max < std::f64::consts::FRAC_PI_2) {
            return Err(out_of_range(
                "steering_max",
                format!("{} not in (0, pi/2)", l.steering_max),
            ));
        }
        for (field, v) in [
            ("headway_floor", self.headway_floor),
            ("corridor_margin", self.corridor_margin),
            ("lateral_horizon", self.lateral_horizon),
            ("release_margin", self.release_margin),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(out_of_range(field, format!("{v} must be non-negative")));
            }
        }
        if !(self.course_bound >= 0.0 && self.course_bound < std::f64::consts::FRAC_PI_2) {
            return Err(out_of_range(
                "course_bound",
                format!("{} not in [0, pi/2)", self.course_bound),
            ));
        }
        for (field, v) in [
            ("worst_case_leader_accel", self.worst_case_leader_accel),
            ("worst_case_follower_accel", self.worst_case_follower_accel),
        ] {
            if !v.is_finite() {
                return Err(out_of_range(field, "must be finite"));
            }
        }
        Ok(())
    }

    /// Distance added to every safe distance, `(a_max + 0.1) * dt * tau`.
    pub fn buffer(&self) -> f64 {
        (self.limits.a_max + 0.1) * self.dt * self.tau
    }

    /// Speed clamped to the absolute range `[0, speed_max]`.
    pub fn clamp_speed(&self, v: f64) -> f64 {
        v.clamp(0.0, self.limits.speed_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeDistance {
    pub x_safe: f64,
    pub x_buff: f64,
}

pub fn safe_distance(speed: f64, config: &ShieldConfig) -> SafeDistance {
    let x_buff = config.buffer();
    SafeDistance {
        x_safe: config.tau * speed + x_buff,
        x_buff,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierEvaluation {
    pub h: f64,
    /// Row on the ego speed correction `v_cbf`.
    pub constraint: AffineConstraint<1>,
    pub safe_distance: f64,
    pub buffer: f64,
}

/// Barrier row for one leader.
///
/// `nominal_speed` is the ego speed the correction is applied to, so the
/// candidate next speed is `nominal_speed + v_cbf`.
pub fn build_longitudinal_constraint(
    ego: &VehicleState,
    leader: &Neighbor,
    nominal_speed: f64,
    config: &ShieldConfig,
) -> BarrierEvaluation {
    let sd = safe_distance(ego.speed, config);
    let h = leader.gap - sd.x_safe;
    let floor = config.headway_floor;
    let dt = config.dt;

    let leader_next = config.clamp_speed(leader.state.speed + config.worst_case_leader_accel * dt);
    let leader_advance = leader.state.longitudinal_factor() * leader_next * dt;
    let a = ego.longitudinal_factor() * dt + config.tau;
    let rhs = leader.gap + leader_advance
        - sd.x_buff
        - floor
        - (1.0 - config.eta) * (h - floor)
        - ROUNDING_MARGIN;
    BarrierEvaluation {
        h,
        constraint: AffineConstraint::new([a], rhs - a * nominal_speed),
        safe_distance: sd.x_safe,
        buffer: sd.x_buff,
    }
}

/// Follower and leader after one motion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairState {
    pub gap: f64,
    pub follower_speed: f64,
    pub leader_speed: f64,
    /// Share of the leader's speed along the road.
    pub leader_factor: f64,
}

/// Whether the barrier condition holds at every step of the worst-case
/// continuation from `pair`: the leader at the worst-case leader
/// acceleration with its course at most `course_bound` off the road, the
/// follower braking at full authority with its whole speed along the road.
///
/// Braking lowers the follower speed and raises every later barrier value, so
/// full braking is the best continuation for every row at once. A pair that
/// fails this test leaves the safe set under some admissible leader
/// behaviour whatever the follower does.
pub fn braking_viable(pair: &PairState, config: &ShieldConfig) -> bool {
    let floor = config.headway_floor;
    let dt = config.dt;
    let brake = config.limits.a_min;
    let x_safe = |v: f64| safe_distance(v, config).x_safe;
    let mut h = pair.gap - x_safe(pair.follower_speed);
    if h < floor {
        return false;
    }
    // Sufficient test: every later step loses at most `s * dt` and the whole
    // continuation at most the follower's braking distance.
    let s = pair.follower_speed;
    let reserve = h - floor - s * s / (2.0 * -brake);
    if config.eta * reserve >= s * dt + ROUNDING_MARGIN {
        return true;
    }

    let leader_factor = pair.leader_factor.min(config.course_bound.cos());
    let (mut gap, mut v, mut v_lead) = (pair.gap, pair.follower_speed, pair.leader_speed);
    while v > 0.0 {
        v = config.clamp_speed(v + brake * dt);
        v_lead = config.clamp_speed(v_lead + config.worst_case_leader_accel * dt);
        gap += leader_factor * v_lead * dt - v * dt;
        let h_next = gap - x_safe(v);
        if !invariance_holds(h, h_next, config) {
            return false;
        }
        h = h_next;
    }
    // Both at rest is the worst case from here on.
    config.eta * (h - floor) >= ROUNDING_MARGIN
}

/// Largest next ego speed in `[lo, hi]` keeping the pair with `leader`
/// viable, or `None` when `hi` already is. Returns `lo` when nothing is.
pub fn viability_cap(
    ego: &VehicleState,
    leader: &Neighbor,
    lo: f64,
    hi: f64,
    config: &ShieldConfig,
) -> Option<f64> {
    let dt = config.dt;
    let leader_factor = leader.state.longitudinal_factor();
    let leader_next = config.clamp_speed(leader.state.speed + config.worst_case_leader_accel * dt);
    let viable = |s: f64| {
        braking_viable(
            &PairState {
                gap: leader.gap + leader_factor * leader_next * dt
                    - ego.longitudinal_factor() * s * dt,
                follower_speed: s,
                leader_speed: leader_next,
                leader_factor,
            },
            config,
        )
    };
    if viable(hi) {
        return None;
    }
    if !viable(lo) {
        return Some(lo);
    }
    // Viability is monotone in the follower speed.
    let (mut ok, mut bad) = (lo, hi);
    loop {
        let mid = 0.5 * (ok + bad);
        if mid <= ok || mid >= bad {
            return Some(ok);
        }
        if viable(mid) {
            ok = mid;
        } else {
            bad = mid;
        }
    }
}

/// Smallest lateral distance between the two vehicles now and after
/// `lateral_horizon` at their current lateral speeds.
fn lateral_separation(a: &RoadUser, b: &RoadUser, config: &ShieldConfig) -> f64 {
    let t = config.lateral_horizon;
    let now = (a.state.y - b.state.y).abs();
    let ahead = (a.state.y + a.state.v_y * t - b.state.y - b.state.v_y * t).abs();
    now.min(ahead)
}

fn corridor_width(a: &RoadUser, b: &RoadUser, config: &ShieldConfig) -> f64 {
    0.5 * (a.geometry.width + b.geometry.width) + config.corridor_margin
}

/// Vehicles in different lanes that are, or are about to be, laterally
/// within the corridor.
pub fn proximate(a: &RoadUser, b: &RoadUser, config: &ShieldConfig) -> bool {
    a.lane != b.lane && lateral_separation(a, b, config) < corridor_width(a, b, config)
}

fn separated(a: &RoadUser, b: &RoadUser, config: &ShieldConfig) -> bool {
    lateral_separation(a, b, config) >= corridor_width(a, b, config) + config.release_margin
}

/// Pairs of vehicles in different lanes whose longitudinal constraint is
/// kept until they are clear of the corridor by the release margin. Without
/// the hysteresis a pair hovering at the corridor edge would be constrained
/// only part of the time and could re-enter it outside the safe set.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeSet<(VehicleId, VehicleId)>);

fn pair_key(a: VehicleId, b: VehicleId) -> (VehicleId, VehicleId) {
    (a.min(b), a.max(b))
}

impl Bindings {
    pub fn contains(&self, a: VehicleId, b: VehicleId) -> bool {
        self.0.contains(&pair_key(a, b))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn clear(&mut self) {
        self.0.clear();
    }

    /// Recompute from the post-step snapshot. `engaged` lists pairs a
    /// proceeding lane change relied on during the step.
    pub fn update(
        &mut self,
        snapshot: &[RoadUser],
        engaged: &[(VehicleId, VehicleId)],
        config: &ShieldConfig,
    ) {
        let engaged: BTreeSet<_> = engaged.iter().map(|&(a, b)| pair_key(a, b)).collect();
        let mut next = BTreeSet::new();
        for (i, a) in snapshot.iter().enumerate() {
            for b in &snapshot[i + 1..] {
                if a.lane == b.lane {
                    continue;
                }
                let key = pair_key(a.id, b.id);
                let keep = self.0.contains(&key) && !separated(a, b, config);
                if keep || engaged.contains(&key) || proximate(a, b, config) {
                    next.insert(key);
                }
            }
        }
        self.0 = next;
    }
}

/// Leaders constraining the ego's longitudinal motion: per lane, the nearest
/// vehicle ahead that is in the ego lane, in `target_lane` when a lane change
/// is under way, proximate, or bound to the ego.
pub fn longitudinal_leaders(
    ego: &RoadUser,
    ctx: &ShieldContext<'_>,
    target_lane: Option<Lane>,
    config: &ShieldConfig,
) -> Vec<Neighbor> {
    Lane::ALL
        .iter()
        .filter_map(|&lane| {
            nearest_ahead(ego, ctx.snapshot, config.sensing_range, |v| {
                v.lane == lane
                    && (lane == ego.lane
                        || Some(lane) == target_lane
                        || ctx.bindings.contains(ego.id, v.id)
                        || proximate(ego, v, config))
            })
        })
        .map(|v| ahead_neighbor(ego, v))
        .collect()
}

/// Minimum of `gap / speed` over `leaders`; `None` when stationary or alone.
pub fn time_headway(ego: &VehicleState, leaders: &[Neighbor]) -> Option<f64> {
    if ego.speed <= 0.0 {
        return None;
    }
    leaders
        .iter()
        .map(|n| n.gap / ego.speed)
        .min_by(f64::total_cmp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub leader: VehicleId,
    pub gap: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalOutcome {
    pub accel: f64,
    pub nominal_speed: f64,
    pub safe_speed: f64,
    pub correction: f64,
    pub slack: f64,
    pub status: QpStatus,
    pub constraints: Vec<ConstraintRecord>,
}

/// Minimal correction of the requested acceleration against `leaders`.
pub fn shield_longitudinal(
    ego: &VehicleState,
    leaders: &[Neighbor],
    raw_accel: f64,
    config: &ShieldConfig,
) -> LongitudinalOutcome {
    let l = &config.limits;
    let requested = raw_accel.clamp(l.a_min, l.a_max);
    let nominal = config.clamp_speed(ego.speed + requested * config.dt);
    let (v_min, v_max) = velocity_bounds(ego.speed, l.a_min, l.a_max, config.dt, l.speed_max);

    let mut qp = ShieldQp::new([v_min - nominal], [v_max - nominal], config.slack_penalty);
    let mut constraints = Vec::with_capacity(leaders.len());
    for leader in leaders {
        let eval = build_longitudinal_constraint(ego, leader, nominal, config);
        qp.rows.push(eval.constraint);
        if let Some(cap) = viability_cap(ego, leader, v_min, v_max, config) {
            qp.rows.push(AffineConstraint::new([1.0], cap - nominal));
        }
        constraints.push(ConstraintRecord {
            leader: leader.id,
            gap: leader.gap,
            h: eval.h,
        });
    }

    // Inputs are finite and the penalty validated, so the solve cannot fail.
    let sol = solve_shield_qp(&qp).expect("validated shield QP");
    let u = sol.u[0];
    let accel = if u == 0.0 {
        requested
    } else {
        ((nominal + u - ego.speed) / config.dt).clamp(l.a_min, l.a_max)
    };
    LongitudinalOutcome {
        accel,
        nominal_speed: nominal,
        safe_speed: nominal + u,
        correction: u,
        slack: sol.slack,
        status: sol.status,
        constraints,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LateralCheck {
    pub safe: bool,
    pub h_target_leading: Option<f64>,
    pub h_target_rear: Option<f64>,
}

fn invariance_holds(h_now: f64, h_next: f64, config: &ShieldConfig) -> bool {
    let floor = config.headway_floor;
    h_now >= floor && h_next - floor - (1.0 - config.eta) * (h_now - floor) >= ROUNDING_MARGIN
}

/// Barrier conditions for the target-lane leader and follower given the
/// ego's next speed. Empty slots are satisfied.
pub fn lateral_check(
    ego: &VehicleState,
    topology: &NeighborTopology,
    ego_next_speed: f64,
    config: &ShieldConfig,
) -> LateralCheck {
    let dt = config.dt;
    let ego_advance = ego.longitudinal_factor() * ego_next_speed * dt;
    let mut check = LateralCheck {
        safe: true,
        ..LateralCheck::default()
    };

    if let Some(front) = &topology.target_leading {
        let h_now = front.gap - safe_distance(ego.speed, config).x_safe;
        let front_next =
            config.clamp_speed(front.state.speed + config.worst_case_leader_accel * dt);
        let gap_next = front.gap + front.state.longitudinal_factor() * front_next * dt - ego_advance;
        let h_next = gap_next - safe_distance(ego_next_speed, config).x_safe;
        check.h_target_leading = Some(h_now);
        check.safe &= invariance_holds(h_now, h_next, config)
            && braking_viable(
                &PairState {
                    gap: gap_next,
                    follower_speed: ego_next_speed,
                    leader_speed: front_next,
                    leader_factor: front.state.longitudinal_factor(),
                },
                config,
            );
    }
    if let Some(rear) = &topology.target_rear {
        let h_now = rear.gap - safe_distance(rear.state.speed, config).x_safe;
        let rear_next =
            config.clamp_speed(rear.state.speed + config.worst_case_follower_accel * dt);
        let gap_next = rear.gap + ego_advance - rear.state.longitudinal_factor() * rear_next * dt;
        let h_next = gap_next - safe_distance(rear_next, config).x_safe;
        check.h_target_rear = Some(h_now);
        check.safe &= invariance_holds(h_now, h_next, config)
            && braking_viable(
                &PairState {
                    gap: gap_next,
                    follower_speed: rear_next,
                    leader_speed: ego_next_speed,
                    leader_factor: ego.longitudinal_factor(),
                },
                config,
            );
    }
    check
}

pub fn lateral_safe_to_change(
    ego: &VehicleState,
    topology: &NeighborTopology,
    ego_next_speed: f64,
    config: &ShieldConfig,
) -> bool {
    lateral_check(ego, topology, ego_next_speed, config).safe
}

/// Immutable per-step view shared by every vehicle's shield call.
#[derive(Debug, Clone, Copy)]
pub struct ShieldContext<'a> {
    pub snapshot: &'a [RoadUser],
    pub layout: &'a RoadLayout,
    pub bindings: &'a Bindings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShieldTrace {
    pub raw: ControlInput,
    pub safe: ControlInput,
    pub longitudinal_corrected: bool,
    pub lateral_vetoed: bool,
    pub lane_change_active: bool,
    pub slack: f64,
    pub status: QpStatus,
    pub h_ol: Option<f64>,
    pub h_otl: Option<f64>,
    pub h_otr: Option<f64>,
    pub constraints: Vec<ConstraintRecord>,
    pub headway: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShieldDecision {
    pub control: ControlInput,
    pub trace: ShieldTrace,
    /// Target-lane neighbours a proceeding lane change relied on.
    pub engaged: Vec<VehicleId>,
}

fn changing_lane(ego: &RoadUser, target_lane: Lane, layout: &RoadLayout) -> bool {
    target_lane != ego.lane && layout.lanes_connected(ego.lane, target_lane, ego.state.x)
}

fn target_slots(topology: &NeighborTopology) -> Vec<VehicleId> {
    [topology.target_leading, topology.target_rear]
        .iter()
        .flatten()
        .map(|n| n.id)
        .collect()
}

fn h_leading(ego: &RoadUser, topology: &NeighborTopology, config: &ShieldConfig) -> Option<f64> {
    topology
        .leading
        .map(|n| n.gap - safe_distance(ego.state.speed, config).x_safe)
}

/// Filter one vehicle's control.
///
/// `centring_steering` is the lane-keeping command toward the centre of the
/// ego's current lane; it replaces the raw steering when a lane change toward
/// `target_lane` is unsafe.
pub fn shield(
    ego: &RoadUser,
    target_lane: Lane,
    raw: ControlInput,
    centring_steering: f64,
    ctx: &ShieldContext<'_>,
    config: &ShieldConfig,
) -> ShieldDecision {
    let limits = &config.limits;
    let clamped = limits.clamp(raw);
    let topology = identify_neighbors(
        ego,
        ctx.snapshot,
        ctx.layout,
        target_lane,
        config.sensing_range,
    );
    let h_ol = h_leading(ego, &topology, config);

    let mut lateral = LateralCheck::default();
    let mut vetoed = false;
    let mut proceeding = None;
    if target_lane != ego.lane {
        if changing_lane(ego, target_lane, ctx.layout) {
            let leaders = longitudinal_leaders(ego, ctx, Some(target_lane), config);
            let tentative = shield_longitudinal(&ego.state, &leaders, clamped.accel, config);
            lateral = lateral_check(&ego.state, &topology, tentative.safe_speed, config);
            if tentative.status == QpStatus::Optimal && lateral.safe {
                proceeding = Some((tentative, leaders));
            } else {
                vetoed = true;
            }
        } else {
            vetoed = true;
        }
    }

    let lane_change_active = proceeding.is_some();
    let engaged = if lane_change_active {
        target_slots(&topology)
    } else {
        Vec::new()
    };
    let (outcome, leaders, steering) = match proceeding {
        Some((outcome, leaders)) => (outcome, leaders, clamped.steering),
        None => {
            let leaders =
                longitudinal_leaders(ego, ctx, None, config);
            let outcome = shield_longitudinal(&ego.state, &leaders, clamped.accel, config);
            let steering = if vetoed {
                centring_steering.clamp(-limits.steering_max, limits.steering_max)
            } else {
                clamped.steering
            };
            (outcome, leaders, steering)
        }
    };

    let safe = ControlInput::new(outcome.accel, steering);
    ShieldDecision {
        control: safe,
        trace: ShieldTrace {
            raw,
            safe,
            longitudinal_corrected: (outcome.accel - clamped.accel).abs() > CORRECTION_TOL,
            lateral_vetoed: vetoed,
            lane_change_active,
            slack: outcome.slack,
            status: outcome.status,
            h_ol,
            h_otl: lateral.h_target_leading,
            h_otr: lateral.h_target_rear,
            constraints: outcome.constraints,
            headway: time_headway(&ego.state, &leaders),
        },
        engaged,
    }
}

/// Trace of the clamped raw control without filtering, observing the same
/// leaders a shielded vehicle would.
pub fn passthrough(
    ego: &RoadUser,
    target_lane: Lane,
    raw: ControlInput,
    ctx: &ShieldContext<'_>,
    config: &ShieldConfig,
) -> ShieldDecision {
    let safe = config.limits.clamp(raw);
    let changing = changing_lane(ego, target_lane, ctx.layout);
    let leaders = longitudinal_leaders(ego, ctx, changing.then_some(target_lane), config);
    let topology = identify_neighbors(
        ego,
        ctx.snapshot,
        ctx.layout,
        target_lane,
        config.sensing_range,
    );
    let sd = safe_distance(ego.state.speed, config);
    let constraints = leaders
        .iter()
        .map(|n| ConstraintRecord {
            leader: n.id,
            gap: n.gap,
            h: n.gap - sd.x_safe,
        })
        .collect();
    ShieldDecision {
        control: safe,
        trace: ShieldTrace {
            raw,
            safe,
            longitudinal_corrected: false,
            lateral_vetoed: false,
            lane_change_active: changing,
            slack: 0.0,
            status: QpStatus::Optimal,
            h_ol: h_leading(ego, &topology, config),
            h_otl: None,
            h_otr: None,
            constraints,
            headway: time_headway(&ego.state, &leaders),
        },
        engaged: if changing {
            target_slots(&topology)
        } else {
            Vec::new()
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::road::{build_merging_layout, RoadConfig};
    use crate::vehicle::{step_kinematics, VehicleGeometry};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn cfg() -> ShieldConfig {
        ShieldConfig::default()
    }

    fn leader_at(gap: f64, speed: f64) -> Neighbor {
        Neighbor {
            id: 1,
            gap,
            state: VehicleState::along_heading(gap + 5.0, 0.0, speed, 0.0),
            geometry: VehicleGeometry::default(),
        }
    }

    fn ego(speed: f64) -> VehicleState {
        VehicleState::along_heading(0.0, 0.0, speed, 0.0)
    }

    /// Next-step barrier from actually integrating both vehicles.
    fn simulated_h_next(e: &VehicleState, accel: f64, l: &Neighbor, leader_accel: f64) -> f64 {
        let c = cfg();
        let g = VehicleGeometry::default();
        let e1 = step_kinematics(e, ControlInput::new(accel, 0.0), &g, &c.limits, c.dt);
        let l1 = step_kinematics(&l.state, ControlInput::new(leader_accel, 0.0), &g, &c.limits, c.dt);
        let gap1 = l1.x - e1.x - g.length;
        gap1 - safe_distance(e1.speed, &c).x_safe
    }

    #[test]
    fn defaults_validate() {
        cfg().validate().unwrap();
        let bad = ShieldConfig { eta: 0.0, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = ShieldConfig { tau: -1.0, ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn safe_distance_examples() {
        let sd = safe_distance(20.0, &cfg());
        assert_abs_diff_eq!(sd.x_buff, 0.17, epsilon = 1e-12);
        assert_abs_diff_eq!(sd.x_safe, 10.17, epsilon = 1e-12);
        let sd0 = safe_distance(0.0, &cfg());
        assert_eq!(sd0.x_safe, sd0.x_buff);
        let mut doubled = cfg();
        doubled.limits.a_max = 10.0;
        for v in [0.0, 7.5, 33.0] {
            let d = safe_distance(v, &doubled).x_safe - safe_distance(v, &cfg()).x_safe;
            assert_abs_diff_eq!(d, 5.0 / 30.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn boundary_state_allows_only_non_advancing_corrections() {
        let c = ShieldConfig {
            headway_floor: 0.0,
            ..cfg()
        };
        let l = leader_at(c.buffer(), 0.0);
        let e = ego(0.0);
        let eval = build_longitudinal_constraint(&e, &l, 0.0, &c);
        assert_abs_diff_eq!(eval.h, 0.0, epsilon = 1e-15);
        assert!(eval.constraint.a[0] > 0.0);
        assert!(eval.constraint.b <= 0.0);
        let out = shield_longitudinal(&e, &[l], c.limits.a_max, &c);
        assert!(out.safe_speed <= 1e-8);
        assert!(out.accel <= 1e-6);
    }

    #[test]
    fn distant_leader_is_slack_free() {
        let e = ego(20.0);
        let l = leader_at(200.0, 20.0);
        let eval = build_longitudinal_constraint(&e, &l, 20.0, &cfg());
        assert!(eval.constraint.b > 1.0);
        let out = shield_longitudinal(&e, &[l], 5.0, &cfg());
        assert_eq!(out.accel, 5.0);
        assert_eq!(out.correction, 0.0);
        assert_eq!(out.slack, 0.0);
    }

    #[test]
    fn overlap_forces_full_braking() {
        let e = ego(10.0);
        let l = leader_at(-1.0, 10.0);
        let eval = build_longitudinal_constraint(&e, &l, 10.0, &cfg());
        assert!(eval.h < 0.0);
        assert!(eval.constraint.b < 0.0);
        let out = shield_longitudinal(&e, &[l], 3.0, &cfg());
        assert_abs_diff_eq!(out.accel, cfg().limits.a_min, epsilon = 1e-9);
        assert_eq!(out.status, QpStatus::SlackActive);
    }

    #[test]
    fn no_leader_passes_request() {
        let out = shield_longitudinal(&ego(20.0), &[], 3.0, &cfg());
        assert_eq!(out.accel, 3.0);
        let out = shield_longitudinal(&ego(20.0), &[], 9.0, &cfg());
        assert_eq!(out.accel, 5.0);
    }

    #[test]
    fn closing_in_brakes_and_keeps_condition() {
        let c = cfg();
        let e = ego(25.0);
        let l = leader_at(30.0, 15.0);
        let out = shield_longitudinal(&e, &[l], 2.0, &c);
        assert!(out.accel < 2.0);
        assert_eq!(out.slack, 0.0);
        let h0 = l.gap - safe_distance(25.0, &c).x_safe;
        let h1 = simulated_h_next(&e, out.accel, &l, c.worst_case_leader_accel);
        assert!(h1 + (c.eta - 1.0) * h0 >= 0.0);
    }

    #[test]
    fn closing_in_from_outside_safe_set_brakes_fully() {
        // At a 12 m gap the 25 m/s ego is already inside its safe distance.
        let c = cfg();
        let out = shield_longitudinal(&ego(25.0), &[leader_at(12.0, 15.0)], 2.0, &c);
        assert_abs_diff_eq!(out.accel, c.limits.a_min, epsilon = 1e-9);
        assert!(out.slack > 0.0);
    }

    fn topology(front: Option<Neighbor>, rear: Option<Neighbor>) -> NeighborTopology {
        NeighborTopology {
            leading: None,
            target_leading: front,
            target_rear: rear,
        }
    }

    #[test]
    fn lateral_examples() {
        let c = cfg();
        let e = ego(20.0);
        assert!(lateral_safe_to_change(&e, &topology(None, None), 20.0, &c));

        let close_rear = leader_at(2.0, 30.0);
        assert!(!lateral_safe_to_change(&e, &topology(None, Some(close_rear)), 20.0, &c));

        let front = leader_at(100.0, 20.0);
        let rear = leader_at(100.0, 22.0);
        assert!(lateral_safe_to_change(&e, &topology(Some(front), Some(rear)), 20.0, &c));
    }

    fn road_user(id: VehicleId, x: f64, lane: Lane, speed: f64, layout: &RoadLayout) -> RoadUser {
        RoadUser {
            id,
            state: VehicleState::along_heading(x, layout.lane_center(lane), speed, 0.0),
            geometry: VehicleGeometry::default(),
            lane,
        }
    }

    #[test]
    fn lane_keeping_with_safe_gap_is_identity() {
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let snapshot = vec![
            road_user(0, 100.0, Lane::Highway, 25.0, &layout),
            road_user(1, 180.0, Lane::Highway, 25.0, &layout),
        ];
        let bindings = Bindings::default();
        let ctx = ShieldContext {
            snapshot: &snapshot,
            layout: &layout,
            bindings: &bindings,
        };
        let raw = ControlInput::new(1.5, 0.01);
        let d = shield(&snapshot[0], Lane::Highway, raw, 0.0, &ctx, &cfg());
        assert_eq!(d.control, raw);
        assert!(!d.trace.longitudinal_corrected && !d.trace.lateral_vetoed);
        assert_eq!(d.trace.constraints.len(), 1);
    }

    #[test]
    fn unsafe_merge_overrides_steering() {
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let snapshot = vec![
            road_user(0, 340.0, Lane::Ramp, 15.0, &layout),
            road_user(1, 336.0, Lane::Highway, 30.0, &layout),
        ];
        let bindings = Bindings::default();
        let ctx = ShieldContext {
            snapshot: &snapshot,
            layout: &layout,
            bindings: &bindings,
        };
        let raw = ControlInput::new(0.0, 0.2);
        let d = shield(&snapshot[0], Lane::Highway, raw, -0.05, &ctx, &cfg());
        assert!(d.trace.lateral_vetoed);
        assert!(!d.trace.lane_change_active);
        assert_eq!(d.control.steering, -0.05);
        assert!(d.trace.h_otr.unwrap() < 0.0);
    }

    #[test]
    fn safe_merge_adds_target_leader_row() {
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let snapshot = vec![
            road_user(0, 340.0, Lane::Ramp, 20.0, &layout),
            road_user(1, 400.0, Lane::Highway, 20.0, &layout),
        ];
        let bindings = Bindings::default();
        let ctx = ShieldContext {
            snapshot: &snapshot,
            layout: &layout,
            bindings: &bindings,
        };
        let raw = ControlInput::new(0.0, 0.1);
        let d = shield(&snapshot[0], Lane::Highway, raw, 0.0, &ctx, &cfg());
        assert!(d.trace.lane_change_active);
        assert_eq!(d.control.steering, 0.1);
        assert_eq!(d.trace.constraints[0].leader, 1);
    }

    #[test]
    fn merge_before_merge_section_is_vetoed() {
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let snapshot = vec![road_user(0, 200.0, Lane::Ramp, 15.0, &layout)];
        let bindings = Bindings::default();
        let ctx = ShieldContext {
            snapshot: &snapshot,
            layout: &layout,
            bindings: &bindings,
        };
        let d = shield(&snapshot[0], Lane::Highway, ControlInput::new(0.0, 0.2), 0.0, &ctx, &cfg());
        assert!(d.trace.lateral_vetoed);
        assert_eq!(d.control.steering, 0.0);
    }

    fn pair(gap: f64, follower: f64, leader: f64) -> PairState {
        PairState {
            gap,
            follower_speed: follower,
            leader_speed: leader,
            leader_factor: 1.0,
        }
    }

    #[test]
    fn braking_viability_examples() {
        let c = cfg();
        assert!(braking_viable(&pair(290.0, 40.0, 0.0), &c));
        assert!(!braking_viable(&pair(138.0, 39.6, 0.0), &c));
        assert!(braking_viable(&pair(20.0, 10.0, 10.0), &c));
        // Inside the safe distance nothing is viable.
        assert!(!braking_viable(&pair(5.0, 20.0, 40.0), &c));
    }

    #[test]
    fn viability_cap_examples() {
        let c = cfg();
        let e = ego(30.0);
        let (lo, hi) = velocity_bounds(30.0, c.limits.a_min, c.limits.a_max, c.dt, c.limits.speed_max);
        assert_eq!(viability_cap(&e, &leader_at(250.0, 0.0), lo, hi, &c), None);
        let cap = viability_cap(&e, &leader_at(102.0, 0.0), lo, hi, &c).unwrap();
        assert!(cap >= lo && cap < hi);
        assert_eq!(viability_cap(&e, &leader_at(90.0, 0.0), lo, hi, &c), Some(lo));
    }

    #[test]
    fn viability_cap_limits_speed_toward_stopped_leader() {
        let c = cfg();
        let e = ego(30.0);
        let l = leader_at(102.0, 0.0);
        let out = shield_longitudinal(&e, &[l], 5.0, &c);
        assert!(out.accel < 5.0);
        assert_eq!(out.slack, 0.0);
        let eval = build_longitudinal_constraint(&e, &l, out.nominal_speed, &c);
        assert!(eval.h > 0.0);
    }

    #[test]
    fn alongside_vehicles_on_their_centres_are_not_proximate() {
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let a = road_user(0, 350.0, Lane::Highway, 20.0, &layout);
        let b = road_user(1, 351.0, Lane::Ramp, 20.0, &layout);
        assert!(!proximate(&a, &b, &cfg()));
        let mut drifting = b;
        drifting.state.y += 1.5;
        assert!(proximate(&a, &drifting, &cfg()));
        let mut heading_over = b;
        heading_over.state = VehicleState::along_heading(351.0, b.state.y + 0.5, 20.0, 0.1);
        assert!(proximate(&a, &heading_over, &cfg()));
    }

    #[test]
    fn bindings_hold_until_clear_of_the_corridor() {
        let c = cfg();
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let a = road_user(0, 350.0, Lane::Highway, 20.0, &layout);
        let mut b = road_user(1, 340.0, Lane::Ramp, 20.0, &layout);
        let mut bindings = Bindings::default();
        bindings.update(&[a, b], &[], &c);
        assert!(bindings.is_empty());
        bindings.update(&[a, b], &[(1, 0)], &c);
        assert!(bindings.contains(0, 1) && bindings.contains(1, 0));
        // Within the release margin the pair stays bound.
        b.state.y = a.state.y - 3.1;
        bindings.update(&[a, b], &[], &c);
        assert!(bindings.contains(0, 1));
        b.state.y = layout.lane_center(Lane::Ramp);
        bindings.update(&[a, b], &[], &c);
        assert!(bindings.is_empty());
    }

    #[test]
    fn context_constrains_target_lane_and_bound_pairs() {
        let c = cfg();
        let layout = build_merging_layout(&RoadConfig::default()).unwrap();
        let snapshot = vec![
            road_user(0, 340.0, Lane::Ramp, 20.0, &layout),
            road_user(1, 380.0, Lane::Highway, 20.0, &layout),
        ];
        let mut bindings = Bindings::default();
        let ids = |b: &Bindings, target| {
            let ctx = ShieldContext {
                snapshot: &snapshot,
                layout: &layout,
                bindings: b,
            };
            longitudinal_leaders(&snapshot[0], &ctx, target, &c)
                .iter()
                .map(|n| n.id)
                .collect::<Vec<_>>()
        };
        assert!(ids(&bindings, None).is_empty());
        assert_eq!(ids(&bindings, Some(Lane::Highway)), vec![1]);
        bindings.update(&snapshot, &[(0, 1)], &c);
        assert_eq!(ids(&bindings, None), vec![1]);
    }

    proptest! {
        #[test]
        fn viable_pairs_stay_viable_and_slack_free(
            v in 0.0f64..40.0, vl in 0.0f64..40.0, gap in 0.0f64..300.0,
            a in -5.0f64..5.0, al in -5.0f64..5.0,
        ) {
            let c = cfg();
            let g = VehicleGeometry::default();
            let e = ego(v);
            let l = leader_at(gap, vl);
            prop_assume!(braking_viable(&pair(gap, v, vl), &c));
            let out = shield_longitudinal(&e, &[l], a, &c);
            prop_assert_eq!(out.slack, 0.0);
            let e1 = step_kinematics(&e, ControlInput::new(out.accel, 0.0), &g, &c.limits, c.dt);
            let l1 = step_kinematics(&l.state, ControlInput::new(al, 0.0), &g, &c.limits, c.dt);
            let next = pair(l1.x - e1.x - g.length, e1.speed, l1.speed);
            prop_assert!(braking_viable(&next, &c), "{next:?}");
        }

        #[test]
        fn viability_is_monotone_in_follower_speed(
            v in 0.0f64..40.0, dv in 0.0f64..5.0, vl in 0.0f64..40.0, gap in 0.0f64..300.0,
        ) {
            let c = cfg();
            if braking_viable(&pair(gap, v + dv, vl), &c) {
                prop_assert!(braking_viable(&pair(gap, v, vl), &c));
            }
        }

        #[test]
        fn shield_is_identity_when_constraint_inactive(
            v in 0.0f64..40.0, vl in 0.0f64..40.0, gap in 0.0f64..150.0, a in -5.0f64..5.0,
        ) {
            let c = cfg();
            let e = ego(v);
            let l = leader_at(gap, vl);
            let nominal = (v + a * c.dt).clamp(0.0, c.limits.speed_max);
            let eval = build_longitudinal_constraint(&e, &l, nominal, &c);
            prop_assume!(eval.constraint.b >= 0.0);
            let (lo, hi) = velocity_bounds(v, c.limits.a_min, c.limits.a_max, c.dt, c.limits.speed_max);
            prop_assume!(viability_cap(&e, &l, lo, hi, &c).is_none_or(|cap| cap >= nominal));
            let out = shield_longitudinal(&e, &[l], a, &c);
            prop_assert_eq!(out.accel, a);
        }

        #[test]
        fn single_leader_only_brakes(
            v in 0.0f64..40.0, vl in 0.0f64..40.0, gap in 0.0f64..80.0, a in -5.0f64..5.0,
        ) {
            let out = shield_longitudinal(&ego(v), &[leader_at(gap, vl)], a, &cfg());
            prop_assert!(out.accel <= a + 1e-12);
        }

        #[test]
        fn slack_free_solutions_satisfy_invariance(
            v in 0.0f64..40.0, vl in 0.0f64..40.0, gap in 0.0f64..80.0,
            a in -5.0f64..5.0, al in -5.0f64..5.0,
        ) {
            let c = cfg();
            let e = ego(v);
            let l = leader_at(gap, vl);
            let out = shield_longitudinal(&e, &[l], a, &c);
            prop_assume!(out.slack == 0.0);
            let h0 = l.gap - safe_distance(v, &c).x_safe;
            let h1 = simulated_h_next(&e, out.accel, &l, al);
            prop_assert!(h1 - c.headway_floor >= (1.0 - c.eta) * (h0 - c.headway_floor) - 1e-9);
        }
    }
}
