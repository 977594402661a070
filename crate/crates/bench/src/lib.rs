//! Fixtures shared by the benchmarks.

use merge_shield::road::Neighbor;
use merge_shield::{BatchSpec, Density, PolicyKind, ShieldQp, VehicleGeometry, VehicleState};

/// A 1-D shield QP with three rows, one of them binding.
pub fn binding_qp() -> ShieldQp<1> {
    ShieldQp::new([-0.33], [0.33], 1e4)
        .with_row([1.0], -0.12)
        .with_row([0.5], 0.4)
        .with_row([-1.0], 0.3)
}

/// Ego closing on a slower leader: the barrier row and the viability row
/// are both exercised.
pub fn closing_pair() -> (VehicleState, Neighbor) {
    let ego = VehicleState::along_heading(0.0, 0.0, 28.0, 0.0);
    let leader = Neighbor {
        id: 1,
        gap: 70.0,
        state: VehicleState::along_heading(75.0, 0.0, 12.0, 0.0),
        geometry: VehicleGeometry::default(),
    };
    (ego, leader)
}

/// One moderate-density episode per iteration.
pub fn episode_spec(policy: PolicyKind, shield: bool) -> BatchSpec {
    BatchSpec {
        shield,
        ..BatchSpec::new(policy, Density::Moderate, 1, vec![1])
    }
}
