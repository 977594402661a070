use thiserror::Error;

/// Invalid or inconsistent configuration.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("{field} must be positive, got {value}")]
    NonPositive { field: &'static str, value: f64 },
    #[error("{field} out of range: {reason}")]
    OutOfRange { field: &'static str, reason: String },
    #[error("spawn region of {region} m cannot fit {count} vehicles at {spacing} m spacing")]
    SpawnDoesNotFit { region: f64, count: usize, spacing: f64 },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("failed to parse scenario: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KinematicsError {
    #[error("steering angle {0} rad outside (-pi/2, pi/2)")]
    SteeringDomain(f64),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("decision dimension {0} not supported (max 2)")]
    Dimension(usize),
    #[error("slack penalty must be positive, got {0}")]
    SlackPenalty(f64),
    #[error("non-finite problem data")]
    NonFinite,
    #[error("grid resolution must be positive, got {0}")]
    Resolution(f64),
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("invalid action index {0}")]
    InvalidAction(u8),
    #[error("episode is finished; call reset")]
    EpisodeDone,
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("episode {episode} (seed {seed}): {source}")]
    Episode {
        seed: u64,
        episode: usize,
        #[source]
        source: EnvError,
    },
    #[error("trace line {line}: {message}")]
    TraceFormat { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Config(#[from] ConfigError),
}
