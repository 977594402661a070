//! Merging-scenario geometry, lane membership and neighbour lookup.
//!
//! The highway is a single through lane along `y = 0`. The on-ramp is modelled
//! as a parallel auxiliary lane one lane width to the right (`y = -lane_width`)
//! that ends at the end of the merge section. The two lanes are connected only
//! inside the merge section.

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::vehicle::{VehicleGeometry, VehicleState};

pub type VehicleId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lane {
    Highway,
    Ramp,
}

impl Lane {
    pub const ALL: [Lane; 2] = [Lane::Highway, Lane::Ramp];

    pub fn left(self) -> Option<Lane> {
        match self {
            Lane::Highway => None,
            Lane::Ramp => Some(Lane::Highway),
        }
    }

    pub fn right(self) -> Option<Lane> {
        match self {
            Lane::Highway => Some(Lane::Ramp),
            Lane::Ramp => None,
        }
    }

    pub fn other(self) -> Lane {
        match self {
            Lane::Highway => Lane::Ramp,
            Lane::Ramp => Lane::Highway,
        }
    }

    fn index(self) -> f64 {
        match self {
            Lane::Highway => 0.0,
            Lane::Ramp => 1.0,
        }
    }
}

/// Segment lengths of the merging road.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadConfig {
    pub entry_length: f64,
    pub ramp_length: f64,
    pub merge_length: f64,
    pub exit_length: f64,
    pub lane_width: f64,
    pub perception_range: f64,
}

impl Default for RoadConfig {
    fn default() -> Self {
        Self {
            entry_length: 220.0,
            ramp_length: 100.0,
            merge_length: 100.0,
            exit_length: 1000.0,
            lane_width: 4.0,
            perception_range: 150.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadLayout {
    pub entry_length: f64,
    pub ramp_length: f64,
    pub merge_length: f64,
    pub exit_length: f64,
    pub lane_width: f64,
}

pub fn build_merging_layout(config: &RoadConfig) -> Result<RoadLayout, ConfigError> {
    for (field, value) in [
        ("entry_length", config.entry_length),
        ("ramp_length", config.ramp_length),
        ("merge_length", config.merge_length),
        ("exit_length", config.exit_length),
        ("lane_width", config.lane_width),
        ("perception_range", config.perception_range),
    ] {
        if !(value > 0.0 && value.is_finite()) {
            return Err(ConfigError::NonPositive { field, value });
        }
    }
    Ok(RoadLayout {
        entry_length: config.entry_length,
        ramp_length: config.ramp_length,
        merge_length: config.merge_length,
        exit_length: config.exit_length,
        lane_width: config.lane_width,
    })
}

impl RoadLayout {
    pub fn total_length(&self) -> f64 {
        self.entry_length + self.ramp_length + self.merge_length + self.exit_length
    }

    pub fn merge_start(&self) -> f64 {
        self.entry_length + self.ramp_length
    }

    pub fn merge_end(&self) -> f64 {
        self.merge_start() + self.merge_length
    }

    pub fn in_merge_section(&self, x: f64) -> bool {
        (self.merge_start()..=self.merge_end()).contains(&x)
    }

    pub fn lane_center(&self, lane: Lane) -> f64 {
        -lane.index() * self.lane_width
    }

    pub fn lane_exists(&self, lane: Lane, x: f64) -> bool {
        match lane {
            Lane::Highway => x <= self.total_length(),
            Lane::Ramp => x <= self.merge_end(),
        }
    }

    /// Lanes between which a vehicle at `x` may move laterally.
    pub fn lanes_connected(&self, a: Lane, b: Lane, x: f64) -> bool {
        a != b && self.in_merge_section(x)
    }

    /// Lane membership with hysteresis: the vehicle leaves `current` only
    /// once another lane's centre is closer by more than a fifth of a lane.
    pub fn update_lane(&self, current: Lane, y: f64) -> Lane {
        let hysteresis = 0.2 * self.lane_width;
        let d_cur = (y - self.lane_center(current)).abs();
        let other = current.other();
        let d_other = (y - self.lane_center(other)).abs();
        if d_cur - d_other > hysteresis {
            other
        } else {
            current
        }
    }
}

/// A vehicle as seen by neighbour queries and the shield.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoadUser {
    pub id: VehicleId,
    pub state: VehicleState,
    pub geometry: VehicleGeometry,
    pub lane: Lane,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: VehicleId,
    /// Bumper-to-bumper gap (m).
    pub gap: f64,
    pub state: VehicleState,
    pub geometry: VehicleGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NeighborTopology {
    pub leading: Option<Neighbor>,
    pub target_leading: Option<Neighbor>,
    pub target_rear: Option<Neighbor>,
}

impl NeighborTopology {
    pub fn gap_leading(&self) -> f64 {
        gap_or_inf(&self.leading)
    }

    pub fn gap_target_leading(&self) -> f64 {
        gap_or_inf(&self.target_leading)
    }

    pub fn gap_target_rear(&self) -> f64 {
        gap_or_inf(&self.target_rear)
    }
}

fn gap_or_inf(n: &Option<Neighbor>) -> f64 {
    n.map_or(f64::INFINITY, |n| n.gap)
}

/// `(front.x - rear.x) - front.length / 2 - rear.length / 2`. Negative on overlap.
pub fn longitudinal_gap(
    rear: &VehicleState,
    rear_geometry: &VehicleGeometry,
    front: &VehicleState,
    front_geometry: &VehicleGeometry,
) -> f64 {
    (front.x - rear.x) - 0.5 * front_geometry.length - 0.5 * rear_geometry.length
}

/// Nearest vehicle strictly ahead of `ego` among those accepted by `filter`.
/// Ties go to the lower id.
pub(crate) fn nearest_ahead<'a>(
    ego: &RoadUser,
    vehicles: &'a [RoadUser],
    range: f64,
    filter: impl Fn(&RoadUser) -> bool,
) -> Option<&'a RoadUser> {
    vehicles
        .iter()
        .filter(|v| v.id != ego.id && v.state.x > ego.state.x)
        .filter(|v| v.state.x - ego.state.x <= range)
        .filter(|v| filter(v))
        .min_by(|a, b| {
            (a.state.x - ego.state.x)
                .total_cmp(&(b.state.x - ego.state.x))
                .then(a.id.cmp(&b.id))
        })
}

/// Nearest vehicle at or behind `ego` among those accepted by `filter`.
fn nearest_behind<'a>(
    ego: &RoadUser,
    vehicles: &'a [RoadUser],
    range: f64,
    filter: impl Fn(&RoadUser) -> bool,
) -> Option<&'a RoadUser> {
    vehicles
        .iter()
        .filter(|v| v.id != ego.id && v.state.x <= ego.state.x)
        .filter(|v| ego.state.x - v.state.x <= range)
        .filter(|v| filter(v))
        .min_by(|a, b| {
            (ego.state.x - a.state.x)
                .total_cmp(&(ego.state.x - b.state.x))
                .then(a.id.cmp(&b.id))
        })
}

pub(crate) fn ahead_neighbor(ego: &RoadUser, front: &RoadUser) -> Neighbor {
    Neighbor {
        id: front.id,
        gap: longitudinal_gap(&ego.state, &ego.geometry, &front.state, &front.geometry),
        state: front.state,
        geometry: front.geometry,
    }
}

fn behind_neighbor(ego: &RoadUser, rear: &RoadUser) -> Neighbor {
    Neighbor {
        id: rear.id,
        gap: longitudinal_gap(&rear.state, &rear.geometry, &ego.state, &ego.geometry),
        state: rear.state,
        geometry: rear.geometry,
    }
}

/// Leading vehicle in the ego lane plus the target-lane leader and follower.
///
/// Target slots are filled only when `target_lane` is reachable from the
/// ego's position (the ego lane itself, or the other lane inside the merge
/// section). Vehicles farther than `perception_range` are ignored.
pub fn identify_neighbors(
    ego: &RoadUser,
    vehicles: &[RoadUser],
    layout: &RoadLayout,
    target_lane: Lane,
    perception_range: f64,
) -> NeighborTopology {
    let leading = nearest_ahead(ego, vehicles, perception_range, |v| v.lane == ego.lane)
        .map(|v| ahead_neighbor(ego, v));

    let reachable =
        target_lane == ego.lane || layout.lanes_connected(ego.lane, target_lane, ego.state.x);
    if !reachable {
        return NeighborTopology {
            leading,
            ..NeighborTopology::default()
        };
    }
    let in_target = |v: &RoadUser| v.lane == target_lane;
    NeighborTopology {
        leading,
        target_leading: nearest_ahead(ego, vehicles, perception_range, in_target)
            .map(|v| ahead_neighbor(ego, v)),
        target_rear: nearest_behind(ego, vehicles, perception_range, in_target)
            .map(|v| behind_neighbor(ego, v)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn user(id: VehicleId, x: f64, lane: Lane, speed: f64, layout: &RoadLayout) -> RoadUser {
        RoadUser {
            id,
            state: VehicleState::along_heading(x, layout.lane_center(lane), speed, 0.0),
            geometry: VehicleGeometry::default(),
            lane,
        }
    }

    fn layout() -> RoadLayout {
        build_merging_layout(&RoadConfig::default()).unwrap()
    }

    #[test]
    fn default_layout_dimensions() {
        let l = layout();
        assert_eq!(l.total_length(), 1420.0);
        assert_eq!(l.merge_end() - l.merge_start(), 100.0);
        assert_eq!(l.merge_start(), 320.0);
    }

    #[test]
    fn degenerate_segment_rejected() {
        let cfg = RoadConfig {
            exit_length: 0.0,
            ..RoadConfig::default()
        };
        assert!(matches!(
            build_merging_layout(&cfg),
            Err(ConfigError::NonPositive { field: "exit_length", .. })
        ));
    }

    #[test]
    fn gap_is_bumper_to_bumper() {
        let g = VehicleGeometry::default();
        let at = |x| VehicleState::along_heading(x, 0.0, 0.0, 0.0);
        assert_eq!(longitudinal_gap(&at(0.0), &g, &at(30.0), &g), 25.0);
        assert_eq!(longitudinal_gap(&at(0.0), &g, &at(5.0), &g), 0.0);
        assert_eq!(longitudinal_gap(&at(0.0), &g, &at(3.0), &g), -2.0);
    }

    #[test]
    fn alone_on_road() {
        let l = layout();
        let ego = user(0, 350.0, Lane::Ramp, 20.0, &l);
        let t = identify_neighbors(&ego, &[ego], &l, Lane::Highway, 150.0);
        assert_eq!(t, NeighborTopology::default());
        assert_eq!(t.gap_leading(), f64::INFINITY);
    }

    #[test]
    fn nearest_ahead_is_leading() {
        let l = layout();
        let ego = user(0, 100.0, Lane::Highway, 20.0, &l);
        let vs = [
            user(1, 160.0, Lane::Highway, 20.0, &l),
            ego,
            user(2, 130.0, Lane::Highway, 20.0, &l),
        ];
        let t = identify_neighbors(&ego, &vs, &l, Lane::Highway, 150.0);
        assert_eq!(t.leading.unwrap().id, 2);
        assert_eq!(t.gap_leading(), 25.0);
    }

    #[test]
    fn ramp_ego_sees_highway_rear_in_merge_section() {
        let l = layout();
        let ego = user(0, 350.0, Lane::Ramp, 15.0, &l);
        let rear = user(1, 340.0, Lane::Highway, 25.0, &l);
        let t = identify_neighbors(&ego, &[ego, rear], &l, Lane::Highway, 150.0);
        let r = t.target_rear.unwrap();
        assert_eq!(r.id, 1);
        // centres 10 m apart minus two half-lengths
        assert_eq!(r.gap, 5.0);
        assert!(t.target_leading.is_none());
        assert!(t.leading.is_none());
    }

    #[test]
    fn lanes_disconnected_before_merge() {
        let l = layout();
        let ego = user(0, 200.0, Lane::Ramp, 15.0, &l);
        let rear = user(1, 190.0, Lane::Highway, 25.0, &l);
        let t = identify_neighbors(&ego, &[ego, rear], &l, Lane::Highway, 150.0);
        assert!(t.target_rear.is_none());
    }

    #[test]
    fn perception_range_limits_neighbors() {
        let l = layout();
        let ego = user(0, 0.0, Lane::Highway, 20.0, &l);
        let far = user(1, 151.0, Lane::Highway, 20.0, &l);
        let t = identify_neighbors(&ego, &[ego, far], &l, Lane::Highway, 150.0);
        assert!(t.leading.is_none());
    }

    #[test]
    fn equidistant_tie_goes_to_lower_id() {
        let l = layout();
        let ego = user(5, 350.0, Lane::Ramp, 20.0, &l);
        let a = user(7, 360.0, Lane::Highway, 20.0, &l);
        let b = user(3, 360.0, Lane::Highway, 20.0, &l);
        let t = identify_neighbors(&ego, &[a, ego, b], &l, Lane::Highway, 150.0);
        assert_eq!(t.target_leading.unwrap().id, 3);
    }

    #[test]
    fn lane_membership_hysteresis() {
        let l = layout();
        // Midpoint between centres stays in the current lane.
        assert_eq!(l.update_lane(Lane::Ramp, -2.0), Lane::Ramp);
        assert_eq!(l.update_lane(Lane::Ramp, -1.7), Lane::Ramp);
        assert_eq!(l.update_lane(Lane::Ramp, -1.5), Lane::Highway);
        assert_eq!(l.update_lane(Lane::Highway, -2.3), Lane::Highway);
        assert_eq!(l.update_lane(Lane::Highway, -2.5), Lane::Ramp);
    }

    proptest! {
        #[test]
        fn neighbors_permutation_invariant(
            xs in proptest::collection::vec((0.0f64..600.0, any::<bool>()), 1..10),
            ego_x in 300.0f64..420.0,
            rot in 0usize..10,
        ) {
            let l = layout();
            let ego = user(100, ego_x, Lane::Ramp, 15.0, &l);
            let mut vs: Vec<RoadUser> = xs.iter().enumerate().map(|(i, (x, hw))| {
                user(i as VehicleId, *x, if *hw { Lane::Highway } else { Lane::Ramp }, 20.0, &l)
            }).collect();
            vs.push(ego);
            let t1 = identify_neighbors(&ego, &vs, &l, Lane::Highway, 150.0);
            let k = rot % vs.len();
            vs.rotate_left(k);
            vs.reverse();
            let t2 = identify_neighbors(&ego, &vs, &l, Lane::Highway, 150.0);
            prop_assert_eq!(t1, t2);

            // The returned leader has the minimal gap among in-lane vehicles ahead.
            if let Some(lead) = t1.leading {
                for v in vs.iter().filter(|v| v.lane == ego.lane && v.id != ego.id && v.state.x > ego.state.x) {
                    let g = longitudinal_gap(&ego.state, &ego.geometry, &v.state, &v.geometry);
                    prop_assert!(lead.gap <= g);
                }
            }
        }

        #[test]
        fn membership_is_one_of_the_lanes(y in -6.0f64..2.0, hw in any::<bool>()) {
            let l = layout();
            let cur = if hw { Lane::Highway } else { Lane::Ramp };
            let next = l.update_lane(cur, y);
            // Nearest lane centre always wins once clearly past the hysteresis band.
            let nearest = if (y - 0.0).abs() <= (y + 4.0).abs() { Lane::Highway } else { Lane::Ramp };
            if ((y - 0.0).abs() - (y + 4.0).abs()).abs() > 0.8 + 1e-9 {
                prop_assert_eq!(next, nearest);
            }
        }
    }
}
