//! Scenario and episode configuration, loadable from TOML.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::behavior::ControllerGains;
use crate::error::ConfigError;
use crate::road::{build_merging_layout, RoadConfig};
use crate::shield::{braking_viable, PairState, ShieldConfig};
use crate::vehicle::VehicleGeometry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Light,
    Moderate,
}

impl Density {
    /// Inclusive vehicle-count band.
    pub fn vehicle_range(self) -> (usize, usize) {
        match self {
            Density::Light => (2, 6),
            Density::Moderate => (4, 8),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Density::Light => "light",
            Density::Moderate => "moderate",
        }
    }
}

impl fmt::Display for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Density {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "light" => Ok(Density::Light),
            "moderate" => Ok(Density::Moderate),
            _ => Err(ConfigError::Unknown {
                kind: "density",
                name: s.to_owned(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub density: Density,
    pub seed: u64,
    /// Behavioural steps to keep driving once no vehicle is left on the ramp.
    pub post_merge_steps: usize,
    /// Hard cap on behavioural steps per episode.
    pub max_steps: usize,
    /// Minimum same-lane centre spacing at spawn (m).
    pub spawn_spacing: f64,
    /// Vehicles spawn in `[0, spawn_region]` (m).
    pub spawn_region: f64,
    pub highway_speed: [f64; 2],
    pub ramp_speed: [f64; 2],
    /// Motion-planning steps per behavioural step.
    pub substeps: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            density: Density::Moderate,
            seed: 0,
            post_merge_steps: 100,
            max_steps: 400,
            spawn_spacing: 50.0,
            spawn_region: 320.0,
            highway_speed: [25.0, 30.0],
            ramp_speed: [10.0, 15.0],
            substeps: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub w_c: f64,
    pub w_s: f64,
    pub w_h: f64,
    pub w_m: f64,
    /// Speed band mapped linearly onto `[0, 1]` (m/s).
    pub speed_low: f64,
    pub speed_high: f64,
    /// Headway at and above which the headway term vanishes (s).
    pub headway_reference: f64,
    /// Headways below this are treated as this value (s).
    pub headway_min: f64,
    /// Ramp waiting time giving the full merge penalty (s).
    pub merge_time_reference: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            w_c: 200.0,
            w_s: 1.0,
            w_h: 4.0,
            w_m: 4.0,
            speed_low: 20.0,
            speed_high: 30.0,
            headway_reference: 0.5,
            headway_min: 0.005,
            merge_time_reference: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub road: RoadConfig,
    pub vehicle: VehicleGeometry,
    pub shield: ShieldConfig,
    pub controller: ControllerGains,
    pub reward: RewardConfig,
    pub episode: EpisodeConfig,
    /// Observed vehicles per observation.
    pub observed_vehicles: usize,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            road: RoadConfig::default(),
            vehicle: VehicleGeometry::default(),
            shield: ShieldConfig::default(),
            controller: ControllerGains::default(),
            reward: RewardConfig::default(),
            episode: EpisodeConfig::default(),
            observed_vehicles: 5,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let config: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        build_merging_layout(&self.road)?;
        if !(self.road.perception_range > 0.0) {
            return Err(ConfigError::NonPositive {
                field: "perception_range",
                value: self.road.perception_range,
            });
        }
        for (field, value) in [
            ("length", self.vehicle.length),
            ("width", self.vehicle.width),
        ] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        self.shield.validate()?;
        let sh = &self.shield;
        // A stopped vehicle first met one step inside the sensing range.
        let first_contact = PairState {
            gap: sh.sensing_range - sh.limits.speed_max * sh.dt - self.vehicle.length,
            follower_speed: sh.limits.speed_max,
            leader_speed: 0.0,
            leader_factor: 1.0,
        };
        if !braking_viable(&first_contact, sh) {
            return Err(ConfigError::OutOfRange {
                field: "sensing_range",
                reason: format!(
                    "{} m does not cover the braking envelope at speed_max",
                    sh.sensing_range
                ),
            });
        }
        self.controller.validate()?;
        let r = &self.reward;
        for (field, value) in [("w_c", r.w_c), ("w_s", r.w_s), ("w_h", r.w_h), ("w_m", r.w_m)] {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(ConfigError::OutOfRange {
                    field,
                    reason: format!("weight {value} must be non-negative"),
                });
            }
        }
        if !(r.speed_high > r.speed_low) {
            return Err(ConfigError::OutOfRange {
                field: "speed_high",
                reason: "must exceed speed_low".into(),
            });
        }
        for (field, value) in [
            ("headway_reference", r.headway_reference),
            ("headway_min", r.headway_min),
            ("merge_time_reference", r.merge_time_reference),
        ] {
            if !(value > 0.0) {
                return Err(ConfigError::NonPositive { field, value });
            }
        }
        let e = &self.episode;
        if e.substeps == 0 || e.max_steps == 0 {
            return Err(ConfigError::OutOfRange {
                field: "episode",
                reason: "substeps and max_steps must be at least 1".into(),
            });
        }
        if !(e.spawn_spacing > self.vehicle.length) {
            return Err(ConfigError::OutOfRange {
                field: "spawn_spacing",
                reason: format!("{} must exceed the vehicle length", e.spawn_spacing),
            });
        }
        if !(e.spawn_region > 0.0) {
            return Err(ConfigError::NonPositive {
                field: "spawn_region",
                value: e.spawn_region,
            });
        }
        for (field, [lo, hi]) in [("highway_speed", e.highway_speed), ("ramp_speed", e.ramp_speed)] {
            if !(lo >= 0.0 && lo <= hi && hi <= self.shield.limits.speed_max) {
                return Err(ConfigError::OutOfRange {
                    field,
                    reason: format!("[{lo}, {hi}] must lie within [0, speed_max]"),
                });
            }
        }
        if self.observed_vehicles == 0 {
            return Err(ConfigError::OutOfRange {
                field: "observed_vehicles",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}
