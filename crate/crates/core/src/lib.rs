//! Deterministic on-ramp merging simulator with a hybrid safety shield: a
//! control barrier function slack QP on longitudinal acceleration and a
//! rule-based gate on lateral manoeuvres.

// Negated comparisons reject NaN together with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod behavior;
pub mod config;
pub mod env;
pub mod error;
pub mod harness;
pub mod qp;
pub mod road;
pub mod shield;
pub mod vehicle;

pub use behavior::{BehaviouralAction, ControllerGains, Policy, PolicyKind, PolicyView};
pub use config::{Density, EpisodeConfig, RewardConfig, ScenarioConfig};
pub use env::{Environment, Observation, StepOutcome, StepTrace};
pub use error::{ConfigError, EnvError, HarnessError, QpError};
pub use harness::{run_batch, run_batch_with, BatchResult, BatchSpec, EpisodeSummary, MetricsReport};
pub use qp::{solve_shield_qp, AffineConstraint, QpSolution, QpStatus, ShieldQp};
pub use road::{Lane, RoadConfig, RoadLayout, VehicleId};
pub use shield::{shield, ShieldConfig, ShieldDecision, ShieldTrace};
pub use vehicle::{ControlInput, VehicleGeometry, VehicleLimits, VehicleState};
