//! Multi-agent episodic merging environment.
//!
//! Each behavioural step runs `substeps` motion-planning steps. Within a
//! motion step every active vehicle computes its feedback references and its
//! (optionally shielded) control from one shared snapshot, then all vehicles
//! advance together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::behavior::{
    decode_action, lane_keep_steering, speed_tracking_accel, BehaviouralAction, Intent,
    PolicyView,
};
use crate::config::{EpisodeConfig, RewardConfig, ScenarioConfig};
use crate::error::{ConfigError, EnvError};
use crate::qp::QpStatus;
use crate::road::{
    build_merging_layout, identify_neighbors, Lane, RoadLayout, RoadUser, VehicleId,
};
use crate::shield::{
    longitudinal_leaders, passthrough, shield, Bindings, time_headway, ConstraintRecord, ShieldContext,
    ShieldDecision,
};
use crate::vehicle::{step_kinematics, VehicleGeometry, VehicleState};

/// Values per observation block: presence flag, x, y, v_x, v_y, psi.
pub const FEATURES: usize = 6;

/// Ego block in the global frame followed by `n` observed-vehicle blocks
/// relative to the ego, nearest first. Absent blocks are all zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub data: Vec<f64>,
}

impl Observation {
    pub fn empty(observed: usize) -> Self {
        Self {
            data: vec![0.0; FEATURES * (observed + 1)],
        }
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * FEATURES..(i + 1) * FEATURES]
    }

    pub fn observed_present(&self) -> usize {
        (1..self.data.len() / FEATURES)
            .filter(|&i| self.block(i)[0] == 1.0)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleStatus {
    Active,
    Exited,
    FailedMerge,
    Crashed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimVehicle {
    pub id: VehicleId,
    pub state: VehicleState,
    pub lane: Lane,
    pub origin: Lane,
    pub intent: Intent,
    pub status: VehicleStatus,
    /// Time spent in the ramp lane (s).
    pub ramp_time: f64,
}

impl SimVehicle {
    pub fn is_active(&self) -> bool {
        self.status == VehicleStatus::Active
    }

    fn road_user(&self, geometry: VehicleGeometry) -> RoadUser {
        RoadUser {
            id: self.id,
            state: self.state,
            geometry,
            lane: self.lane,
        }
    }
}

/// One record per vehicle per motion step, taken at the state the control
/// was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub episode: u64,
    pub step: usize,
    pub substep: usize,
    pub vehicle: VehicleId,
    pub lane: Lane,
    pub target_lane: Lane,
    pub state: VehicleState,
    pub raw_accel: f64,
    pub raw_steering: f64,
    pub safe_accel: f64,
    pub safe_steering: f64,
    pub longitudinal_corrected: bool,
    pub lateral_vetoed: bool,
    pub lane_change_active: bool,
    pub h_ol: Option<f64>,
    pub h_otl: Option<f64>,
    pub h_otr: Option<f64>,
    pub slack: f64,
    pub qp_status: QpStatus,
    pub headway: Option<f64>,
    pub constraints: Vec<ConstraintRecord>,
}

/// Running totals for the current episode.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub vehicle_substeps: usize,
    pub speed_sum: f64,
    pub min_headway: Option<f64>,
    pub interventions: usize,
    pub slack_events: usize,
    pub crash_pairs: usize,
    pub failed_merges: usize,
    pub exited: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepInfo {
    pub crashed_pairs: Vec<(VehicleId, VehicleId)>,
    /// Cumulative over the episode.
    pub crash_count: usize,
    pub failed_merges: usize,
    /// Per returned vehicle: whether the shield altered any of its controls this step.
    pub interventions: Vec<bool>,
    pub episode_done: bool,
    pub traces: Vec<StepTrace>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepOutcome {
    /// Vehicles that were active when the step began, ascending id.
    pub ids: Vec<VehicleId>,
    pub observations: Vec<Observation>,
    /// Individual rewards.
    pub rewards: Vec<f64>,
    /// Neighbourhood-averaged rewards.
    pub shared_rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardInputs {
    pub crashed: bool,
    pub speed: f64,
    pub headway: Option<f64>,
    pub on_ramp: bool,
    pub ramp_time: f64,
}

/// `w_c r_c + w_s r_s + w_h r_h + w_m r_m`.
pub fn compute_reward(inputs: &RewardInputs, cfg: &RewardConfig) -> f64 {
    let r_c = if inputs.crashed { -1.0 } else { 0.0 };
    let r_s = ((inputs.speed - cfg.speed_low) / (cfg.speed_high - cfg.speed_low)).clamp(0.0, 1.0);
    let r_h = inputs.headway.map_or(0.0, |h| {
        (h.max(cfg.headway_min) / cfg.headway_reference).ln().min(0.0)
    });
    let r_m = if inputs.on_ramp {
        -(inputs.ramp_time / cfg.merge_time_reference).clamp(0.0, 1.0)
    } else {
        0.0
    };
    cfg.w_c * r_c + cfg.w_s * r_s + cfg.w_h * r_h + cfg.w_m * r_m
}

/// Mean of the ego reward and its neighbours' rewards.
pub fn shared_reward(own: f64, neighbours: &[f64]) -> f64 {
    (own + neighbours.iter().sum::<f64>()) / (1 + neighbours.len()) as f64
}

fn corners(state: &VehicleState, geometry: &VehicleGeometry) -> [(f64, f64); 4] {
    let (s, c) = state.psi.sin_cos();
    let hl = 0.5 * geometry.length;
    let hw = 0.5 * geometry.width;
    [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
        .map(|(u, v)| (state.x + u * c - v * s, state.y + u * s + v * c))
}

fn projection(points: &[(f64, f64); 4], axis: (f64, f64)) -> (f64, f64) {
    points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let d = p.0 * axis.0 + p.1 * axis.1;
        (lo.min(d), hi.max(d))
    })
}

/// Separating-axis test on the two oriented footprints.
pub fn footprints_overlap(a: &RoadUser, b: &RoadUser) -> bool {
    let reach = 0.5 * (a.geometry.length.hypot(a.geometry.width) + b.geometry.length.hypot(b.geometry.width));
    if (a.state.x - b.state.x).abs() > reach || (a.state.y - b.state.y).abs() > reach {
        return false;
    }
    let ca = corners(&a.state, &a.geometry);
    let cb = corners(&b.state, &b.geometry);
    [a.state.psi, b.state.psi].iter().all(|&psi| {
        let (s, c) = psi.sin_cos();
        [(c, s), (-s, c)].iter().all(|&axis| {
            let (alo, ahi) = projection(&ca, axis);
            let (blo, bhi) = projection(&cb, axis);
            ahi > blo && bhi > alo
        })
    })
}

/// Every overlapping pair, lower id first, in ascending order.
pub fn detect_crash(vehicles: &[RoadUser]) -> Vec<(VehicleId, VehicleId)> {
    let mut pairs = Vec::new();
    for (i, a) in vehicles.iter().enumerate() {
        for b in &vehicles[i + 1..] {
            if footprints_overlap(a, b) {
                pairs.push((a.id.min(b.id), a.id.max(b.id)));
            }
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Uniformly random positions in `[0, region]` with consecutive spacing of at
/// least `spacing`, ascending.
fn spawn_positions(rng: &mut ChaCha8Rng, count: usize, region: f64, spacing: f64) -> Vec<f64> {
    if count == 0 {
        return Vec::new();
    }
    let free = region - (count - 1) as f64 * spacing;
    let mut offsets: Vec<f64> = (0..count).map(|_| rng.random_range(0.0..=free)).collect();
    offsets.sort_by(f64::total_cmp);
    offsets
        .into_iter()
        .enumerate()
        .map(|(i, u)| u + i as f64 * spacing)
        .collect()
}

fn lane_capacity(region: f64, spacing: f64) -> usize {
    (region / spacing).floor() as usize + 1
}

pub struct Environment {
    scenario: ScenarioConfig,
    layout: RoadLayout,
    episode: EpisodeConfig,
    shield_enabled: bool,
    record_traces: bool,
    episode_id: u64,
    vehicles: Vec<SimVehicle>,
    post_merge_steps: usize,
    done: bool,
    stats: EpisodeStats,
    bindings: Bindings,
}

impl Environment {
    pub fn new(scenario: ScenarioConfig) -> Result<Self, ConfigError> {
        scenario.validate()?;
        let layout = build_merging_layout(&scenario.road)?;
        Ok(Self {
            episode: scenario.episode,
            scenario,
            layout,
            shield_enabled: true,
            record_traces: false,
            episode_id: 0,
            vehicles: Vec::new(),
            post_merge_steps: 0,
            done: true,
            stats: EpisodeStats::default(),
            bindings: Bindings::default(),
        })
    }

    pub fn set_shield(&mut self, enabled: bool) {
        self.shield_enabled = enabled;
    }

    pub fn shield_enabled(&self) -> bool {
        self.shield_enabled
    }

    pub fn set_recording(&mut self, record: bool) {
        self.record_traces = record;
    }

    /// Episode id stamped on trace records.
    pub fn set_episode_id(&mut self, id: u64) {
        self.episode_id = id;
    }

    pub fn scenario(&self) -> &ScenarioConfig {
        &self.scenario
    }

    pub fn layout(&self) -> &RoadLayout {
        &self.layout
    }

    pub fn vehicles(&self) -> &[SimVehicle] {
        &self.vehicles
    }

    pub fn stats(&self) -> &EpisodeStats {
        &self.stats
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn active_ids(&self) -> Vec<VehicleId> {
        self.vehicles
            .iter()
            .filter(|v| v.is_active())
            .map(|v| v.id)
            .collect()
    }

    /// Spawn a new episode and return one observation per vehicle.
    pub fn reset(&mut self, episode: EpisodeConfig) -> Result<Vec<Observation>, EnvError> {
        let s = &self.scenario;
        let e = episode;
        let check = ScenarioConfig { episode: e, ..*s };
        check.validate()?;

        let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
        let (lo, hi) = e.density.vehicle_range();
        let capacity = lane_capacity(e.spawn_region, e.spawn_spacing);
        if capacity == 0 {
            return Err(ConfigError::SpawnDoesNotFit {
                region: e.spawn_region,
                count: lo,
                spacing: e.spawn_spacing,
            }
            .into());
        }
        let mut count = rng.random_range(lo..=hi);
        // Shrink toward a count the two lanes can hold.
        count = count.min(2 * capacity);
        let n_ramp = count / 2;
        let n_highway = count - n_ramp;

        let highway_x = spawn_positions(&mut rng, n_highway, e.spawn_region, e.spawn_spacing);
        let ramp_x = spawn_positions(&mut rng, n_ramp, e.spawn_region, e.spawn_spacing);
        let mut vehicles = Vec::with_capacity(count);
        for (lane, xs, [vlo, vhi]) in [
            (Lane::Highway, highway_x, e.highway_speed),
            (Lane::Ramp, ramp_x, e.ramp_speed),
        ] {
            for x in xs {
                let speed = rng.random_range(vlo..=vhi);
                vehicles.push(SimVehicle {
                    id: vehicles.len() as VehicleId,
                    state: VehicleState::along_heading(x, self.layout.lane_center(lane), speed, 0.0),
                    lane,
                    origin: lane,
                    intent: Intent {
                        target_lane: lane,
                        target_speed: speed,
                    },
                    status: VehicleStatus::Active,
                    ramp_time: 0.0,
                });
            }
        }

        self.episode = e;
        self.vehicles = vehicles;
        self.post_merge_steps = 0;
        self.done = false;
        self.stats = EpisodeStats::default();
        self.bindings.clear();
        Ok(self
            .vehicles
            .iter()
            .map(|v| self.observe(v.id))
            .collect())
    }

    fn road_users(&self) -> Vec<RoadUser> {
        self.vehicles
            .iter()
            .filter(|v| v.is_active())
            .map(|v| v.road_user(self.scenario.vehicle))
            .collect()
    }

    fn index_of(&self, id: VehicleId) -> usize {
        self.vehicles
            .iter()
            .position(|v| v.id == id)
            .expect("known vehicle id")
    }

    /// Observation of vehicle `id` against the currently active vehicles.
    pub fn observe(&self, id: VehicleId) -> Observation {
        let n = self.scenario.observed_vehicles;
        let mut obs = Observation::empty(n);
        let ego = &self.vehicles[self.index_of(id)];
        let s = ego.state;
        obs.data[..FEATURES].copy_from_slice(&[1.0, s.x, s.y, s.v_x, s.v_y, s.psi]);
        for (slot, other) in self.observed_neighbours(ego).into_iter().enumerate() {
            let o = other.state;
            let base = (slot + 1) * FEATURES;
            obs.data[base..base + FEATURES].copy_from_slice(&[
                1.0,
                o.x - s.x,
                o.y - s.y,
                o.v_x - s.v_x,
                o.v_y - s.v_y,
                o.psi - s.psi,
            ]);
        }
        obs
    }

    fn observed_neighbours(&self, ego: &SimVehicle) -> Vec<&SimVehicle> {
        let range = self.scenario.road.perception_range;
        let mut others: Vec<&SimVehicle> = self
            .vehicles
            .iter()
            .filter(|v| v.is_active() && v.id != ego.id)
            .filter(|v| (v.state.x - ego.state.x).abs() <= range)
            .collect();
        others.sort_by(|a, b| {
            (a.state.x - ego.state.x)
                .abs()
                .total_cmp(&(b.state.x - ego.state.x).abs())
                .then(a.id.cmp(&b.id))
        });
        others.truncate(self.scenario.observed_vehicles);
        others
    }

    /// Policy inputs for every active vehicle, ascending id.
    pub fn policy_views(&self) -> Vec<PolicyView<'_>> {
        let users = self.road_users();
        self.vehicles
            .iter()
            .filter(|v| v.is_active())
            .map(|v| {
                let ego = v.road_user(self.scenario.vehicle);
                let x = v.state.x;
                let other = v.lane.other();
                let merge_topology = self.layout.lanes_connected(v.lane, other, x).then(|| {
                    identify_neighbors(
                        &ego,
                        &users,
                        &self.layout,
                        other,
                        self.scenario.road.perception_range,
                    )
                });
                PolicyView {
                    id: v.id,
                    observation: self.observe(v.id),
                    state: v.state,
                    lane: v.lane,
                    intent: v.intent,
                    in_merge_section: self.layout.in_merge_section(x),
                    merge_topology,
                    shield: &self.scenario.shield,
                }
            })
            .collect()
    }

    /// Advance one behavioural step. `actions` holds one entry per active
    /// vehicle in ascending id order.
    pub fn step(&mut self, actions: &[BehaviouralAction]) -> Result<StepOutcome, EnvError> {
        let order: Vec<usize> = (0..self.vehicles.len()).collect();
        self.step_in_order(actions, &order)
    }

    fn step_in_order(
        &mut self,
        actions: &[BehaviouralAction],
        order: &[usize],
    ) -> Result<StepOutcome, EnvError> {
        if self.done {
            return Err(EnvError::EpisodeDone);
        }
        let ids = self.active_ids();
        if actions.len() != ids.len() {
            return Err(EnvError::ActionCount {
                expected: ids.len(),
                got: actions.len(),
            });
        }

        let speed_max = self.scenario.shield.limits.speed_max;
        for (&id, &action) in ids.iter().zip(actions) {
            let i = self.index_of(id);
            let v = &mut self.vehicles[i];
            v.intent = decode_action(
                action,
                v.lane,
                v.state.x,
                v.intent,
                &self.layout,
                &self.scenario.controller,
                speed_max,
            );
        }

        let mut info = StepInfo::default();
        let mut intervened = vec![false; self.vehicles.len()];
        let step = self.stats.steps;
        for substep in 0..self.episode.substeps {
            if self.substep(step, substep, order, &mut intervened, &mut info) {
                self.done = true;
                break;
            }
        }
        self.stats.steps += 1;

        if !self.vehicles.iter().any(|v| v.is_active() && v.lane == Lane::Ramp) {
            self.post_merge_steps += 1;
        }
        if self.post_merge_steps >= self.episode.post_merge_steps
            || self.stats.steps >= self.episode.max_steps
            || !self.vehicles.iter().any(|v| v.is_active())
        {
            self.done = true;
        }

        let observations: Vec<Observation> = ids.iter().map(|&id| self.observe(id)).collect();
        let rewards: Vec<f64> = ids.iter().map(|&id| self.reward_of(id)).collect();
        let shared_rewards = ids
            .iter()
            .zip(&rewards)
            .map(|(&id, &own)| {
                let ego = &self.vehicles[self.index_of(id)];
                let neighbours: Vec<f64> = self
                    .observed_neighbours(ego)
                    .iter()
                    .filter_map(|n| ids.iter().position(|&j| j == n.id).map(|k| rewards[k]))
                    .collect();
                shared_reward(own, &neighbours)
            })
            .collect();
        let dones = ids
            .iter()
            .map(|&id| self.done || !self.vehicles[self.index_of(id)].is_active())
            .collect();

        info.crash_count = self.stats.crash_pairs;
        info.failed_merges = self.stats.failed_merges;
        info.interventions = ids.iter().map(|&id| intervened[self.index_of(id)]).collect();
        info.episode_done = self.done;
        info.traces.sort_by_key(|t| (t.substep, t.vehicle));
        Ok(StepOutcome {
            ids,
            observations,
            rewards,
            shared_rewards,
            dones,
            info,
        })
    }

    fn reward_of(&self, id: VehicleId) -> f64 {
        let v = &self.vehicles[self.index_of(id)];
        let ego = v.road_user(self.scenario.vehicle);
        let users = self.road_users();
        let ctx = ShieldContext {
            snapshot: &users,
            layout: &self.layout,
            bindings: &self.bindings,
        };
        let leaders = longitudinal_leaders(&ego, &ctx, None, &self.scenario.shield);
        compute_reward(
            &RewardInputs {
                crashed: v.status == VehicleStatus::Crashed,
                speed: v.state.speed,
                headway: time_headway(&v.state, &leaders),
                on_ramp: v.lane == Lane::Ramp && v.is_active(),
                ramp_time: v.ramp_time,
            },
            &self.scenario.reward,
        )
    }

    /// One motion step. Returns true when a crash ended the episode.
    fn substep(
        &mut self,
        step: usize,
        substep: usize,
        order: &[usize],
        intervened: &mut [bool],
        info: &mut StepInfo,
    ) -> bool {
        let sc = &self.scenario;
        let geometry = sc.vehicle;
        let snapshot: Vec<RoadUser> = order
            .iter()
            .map(|&i| &self.vehicles[i])
            .filter(|v| v.is_active())
            .map(|v| v.road_user(geometry))
            .collect();
        let ctx = ShieldContext {
            snapshot: &snapshot,
            layout: &self.layout,
            bindings: &self.bindings,
        };

        let mut decisions: Vec<(usize, ShieldDecision)> = Vec::with_capacity(snapshot.len());
        for &i in order {
            let v = &self.vehicles[i];
            if !v.is_active() {
                continue;
            }
            let ego = v.road_user(geometry);
            let limits = &sc.shield.limits;
            let raw = crate::vehicle::ControlInput::new(
                speed_tracking_accel(&v.state, v.intent.target_speed, &sc.controller, limits),
                lane_keep_steering(
                    &v.state,
                    self.layout.lane_center(v.intent.target_lane),
                    &geometry,
                    limits,
                    &sc.controller,
                ),
            );
            let decision = if self.shield_enabled {
                let centring = lane_keep_steering(
                    &v.state,
                    self.layout.lane_center(v.lane),
                    &geometry,
                    limits,
                    &sc.controller,
                );
                shield(&ego, v.intent.target_lane, raw, centring, &ctx, &sc.shield)
            } else {
                passthrough(&ego, v.intent.target_lane, raw, &ctx, &sc.shield)
            };
            decisions.push((i, decision));
        }

        for (i, d) in &decisions {
            let v = &self.vehicles[*i];
            let t = &d.trace;
            self.stats.vehicle_substeps += 1;
            self.stats.speed_sum += v.state.speed;
            if let Some(h) = t.headway {
                self.stats.min_headway = Some(self.stats.min_headway.map_or(h, |m| m.min(h)));
            }
            if t.longitudinal_corrected || t.lateral_vetoed {
                self.stats.interventions += 1;
                intervened[*i] = true;
            }
            if t.status != QpStatus::Optimal {
                self.stats.slack_events += 1;
            }
            if self.record_traces {
                info.traces.push(StepTrace {
                    episode: self.episode_id,
                    step,
                    substep,
                    vehicle: v.id,
                    lane: v.lane,
                    target_lane: v.intent.target_lane,
                    state: v.state,
                    raw_accel: t.raw.accel,
                    raw_steering: t.raw.steering,
                    safe_accel: t.safe.accel,
                    safe_steering: t.safe.steering,
                    longitudinal_corrected: t.longitudinal_corrected,
                    lateral_vetoed: t.lateral_vetoed,
                    lane_change_active: t.lane_change_active,
                    h_ol: t.h_ol,
                    h_otl: t.h_otl,
                    h_otr: t.h_otr,
                    slack: t.slack,
                    qp_status: t.status,
                    headway: t.headway,
                    constraints: t.constraints.clone(),
                });
            }
        }

        let dt = sc.shield.dt;
        let total = self.layout.total_length();
        let merge_end = self.layout.merge_end();
        let engaged: Vec<(VehicleId, VehicleId)> = decisions
            .iter()
            .flat_map(|(i, d)| {
                let id = self.vehicles[*i].id;
                d.engaged.iter().map(move |&other| (id, other))
            })
            .collect();
        for (i, d) in decisions {
            let layout = &self.layout;
            let v = &mut self.vehicles[i];
            v.state = step_kinematics(&v.state, d.control, &geometry, &sc.shield.limits, dt);
            v.lane = layout.update_lane(v.lane, v.state.y);
            if v.intent.target_lane != v.lane
                && !layout.lanes_connected(v.lane, v.intent.target_lane, v.state.x)
            {
                v.intent.target_lane = v.lane;
            }
            if v.lane == Lane::Ramp {
                v.ramp_time += dt;
            }
            if v.state.x >= total {
                v.status = VehicleStatus::Exited;
                self.stats.exited += 1;
            } else if v.lane == Lane::Ramp && v.state.x > merge_end {
                v.status = VehicleStatus::FailedMerge;
                self.stats.failed_merges += 1;
            }
        }

        let users = self.road_users();
        self.bindings
            .update(&users, &engaged, &self.scenario.shield);
        let crashes = detect_crash(&users);
        if crashes.is_empty() {
            return false;
        }
        for &(a, b) in &crashes {
            for id in [a, b] {
                let i = self.index_of(id);
                self.vehicles[i].status = VehicleStatus::Crashed;
            }
        }
        self.stats.crash_pairs += crashes.len();
        info.crashed_pairs.extend(crashes);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Density;
    use approx::assert_abs_diff_eq;

    fn user(id: VehicleId, x: f64, y: f64, psi: f64) -> RoadUser {
        RoadUser {
            id,
            state: VehicleState::along_heading(x, y, 20.0, psi),
            geometry: VehicleGeometry::default(),
            lane: Lane::Highway,
        }
    }

    fn env(seed: u64, density: Density) -> (Environment, Vec<Observation>) {
        let mut e = Environment::new(ScenarioConfig::default()).unwrap();
        let obs = e
            .reset(EpisodeConfig {
                density,
                seed,
                ..EpisodeConfig::default()
            })
            .unwrap();
        (e, obs)
    }

    #[test]
    fn crash_examples() {
        assert!(detect_crash(&[user(0, 0.0, 0.0, 0.0), user(1, 30.0, 0.0, 0.0)]).is_empty());
        // Longitudinal gap of -0.5 m.
        assert_eq!(
            detect_crash(&[user(3, 0.0, 0.0, 0.0), user(1, 4.5, 0.0, 0.0)]),
            vec![(1, 3)]
        );
        assert!(detect_crash(&[user(0, 0.0, 0.0, 0.0), user(1, 0.0, -4.0, 0.0)]).is_empty());
        assert!(detect_crash(&[user(0, 0.0, 0.0, 0.0), user(1, 0.0, -2.1, 0.0)]).is_empty());
    }

    #[test]
    fn rotated_footprints_use_corners() {
        // Axis-aligned boxes would be 0.1 m apart; the rotated corner reaches across.
        let a = user(0, 0.0, 0.0, 0.0);
        let b = user(1, 5.1, 0.3, 0.3);
        assert!(footprints_overlap(&a, &b));
        assert!(footprints_overlap(&b, &a));
    }

    #[test]
    fn reward_examples() {
        let cfg = RewardConfig::default();
        let base = RewardInputs {
            crashed: false,
            speed: cfg.speed_high,
            headway: Some(10.0),
            on_ramp: false,
            ramp_time: 0.0,
        };
        assert_eq!(compute_reward(&base, &cfg), cfg.w_s);
        let crash = RewardInputs {
            crashed: true,
            ..base
        };
        assert_eq!(compute_reward(&crash, &cfg), cfg.w_s - cfg.w_c);
        let at_reference = RewardInputs {
            headway: Some(cfg.headway_reference),
            ..base
        };
        assert_eq!(compute_reward(&at_reference, &cfg), cfg.w_s);
        let tight = RewardInputs {
            headway: Some(0.0),
            speed: 0.0,
            on_ramp: true,
            ramp_time: 1e6,
            ..crash
        };
        let worst = compute_reward(&tight, &cfg);
        let bound = cfg.w_c + cfg.w_h * (cfg.headway_reference / cfg.headway_min).ln() + cfg.w_m;
        assert_abs_diff_eq!(worst, -bound, epsilon = 1e-9);
    }

    #[test]
    fn shared_reward_examples() {
        assert_eq!(shared_reward(0.7, &[]), 0.7);
        assert_abs_diff_eq!(shared_reward(0.4, &[0.8]), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(shared_reward(0.8, &[0.4]), 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(
            shared_reward(1.0, &[2.0, 3.0]),
            shared_reward(1.0, &[3.0, 2.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn reset_respects_density_and_spacing() {
        for seed in 0..200 {
            for density in [Density::Light, Density::Moderate] {
                let (e, obs) = env(seed, density);
                let (lo, hi) = density.vehicle_range();
                let n = e.vehicles().len();
                assert!((lo..=hi).contains(&n));
                assert_eq!(obs.len(), n);
                for lane in Lane::ALL {
                    let mut xs: Vec<f64> = e
                        .vehicles()
                        .iter()
                        .filter(|v| v.lane == lane)
                        .map(|v| v.state.x)
                        .collect();
                    xs.sort_by(f64::total_cmp);
                    for w in xs.windows(2) {
                        assert!(w[1] - w[0] >= 50.0 - 1e-9);
                    }
                    assert!(xs.iter().all(|&x| (0.0..=320.0).contains(&x)));
                }
            }
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let (a, oa) = env(42, Density::Moderate);
        let (b, ob) = env(42, Density::Moderate);
        assert_eq!(a.vehicles(), b.vehicles());
        assert_eq!(oa, ob);
    }

    #[test]
    fn observation_is_relative_and_sorted() {
        let (e, obs) = env(3, Density::Moderate);
        for (v, o) in e.vehicles().iter().zip(&obs) {
            assert_eq!(o.data.len(), FEATURES * 6);
            assert_eq!(o.block(0)[1], v.state.x);
            let mut last = -1.0;
            for i in 1..6 {
                let b = o.block(i);
                if b[0] == 0.0 {
                    assert!(b.iter().all(|&x| x == 0.0));
                    continue;
                }
                assert!(b[1].abs() >= last);
                last = b[1].abs();
            }
            for other in e.observed_neighbours(v) {
                let slot = (1..6)
                    .find(|&i| o.block(i)[1] == other.state.x - v.state.x && o.block(i)[2] == other.state.y - v.state.y)
                    .expect("observed vehicle present");
                assert_eq!(o.block(slot)[0], 1.0);
            }
        }
    }

    #[test]
    fn cruising_alone_advances_by_three_motion_steps() {
        let mut e = Environment::new(ScenarioConfig::default()).unwrap();
        e.reset(EpisodeConfig {
            density: Density::Light,
            seed: 1,
            ..EpisodeConfig::default()
        })
        .unwrap();
        // Keep only one highway vehicle on the road.
        e.vehicles.truncate(1);
        let v0 = e.vehicles[0].state;
        let out = e.step(&[BehaviouralAction::FollowLane]).unwrap();
        let v1 = e.vehicles[0].state;
        assert_abs_diff_eq!(v1.x - v0.x, v0.speed * 3.0 / 15.0, epsilon = 1e-9);
        assert_eq!(v1.y, v0.y);
        assert_eq!(out.ids, vec![0]);
    }

    #[test]
    fn action_count_mismatch_and_done_errors() {
        let (mut e, _) = env(5, Density::Light);
        let n = e.active_ids().len();
        assert!(matches!(
            e.step(&vec![BehaviouralAction::FollowLane; n + 1]),
            Err(EnvError::ActionCount { .. })
        ));
        while !e.is_done() {
            let n = e.active_ids().len();
            e.step(&vec![BehaviouralAction::FollowLane; n]).unwrap();
        }
        assert!(matches!(e.step(&[]), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn update_order_does_not_matter() {
        let run = |reverse: bool| {
            let (mut e, _) = env(11, Density::Moderate);
            e.set_recording(true);
            let mut all = Vec::new();
            let mut k = 0u8;
            while !e.is_done() {
                let n = e.active_ids().len();
                let actions: Vec<BehaviouralAction> = (0..n)
                    .map(|i| BehaviouralAction::ALL[((k as usize) + i) % 5])
                    .collect();
                k = k.wrapping_add(1);
                let mut order: Vec<usize> = (0..e.vehicles.len()).collect();
                if reverse {
                    order.reverse();
                }
                let out = e.step_in_order(&actions, &order).unwrap();
                all.push((out.rewards, out.observations, out.info.traces));
            }
            all
        };
        let a = run(false);
        let b = run(true);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(format!("{x:?}"), format!("{y:?}"));
        }
    }
}
