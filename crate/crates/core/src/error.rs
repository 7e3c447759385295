use thiserror::Error;

use crate::network::Diagnostic;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("JSON parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("invalid network: {}", join(.0))]
    Invalid(Vec<Diagnostic>),
}

fn join(d: &[Diagnostic]) -> String {
    d.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("phase {phase} out of range for node '{node}' ({n_phases} phases)")]
    InvalidPhase { node: String, phase: usize, n_phases: usize },
    #[error("expected {expected} phase requests, got {got}")]
    RequestCount { expected: usize, got: usize },
    #[error("negative or non-finite arrival rate {rate} on origin link '{link}'")]
    NegativeRate { link: String, rate: f64 },
    #[error("demand references '{0}', which is not an origin link")]
    NotAnOrigin(String),
    #[error("lost time must be >= 0, got {0}")]
    LostTime(f64),
    #[error("lost time and stochastic demand need the `mesoscopic` feature")]
    MesoscopicDisabled,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unknown scenario '{name}'; available: {}", .available.join(", "))]
    Unknown { name: String, available: Vec<String> },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("unknown controller '{0}'; available: fixed, webster, sotl, maxpressure, ltmp, effmp, greenwave")]
    Unknown(String),
    #[error("invalid controller config: {0}")]
    Config(String),
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("invalid action {value} for node {node}: {reason}")]
    InvalidAction { node: usize, value: usize, reason: &'static str },
    #[error("expected {expected} actions, got {got}")]
    ActionCount { expected: usize, got: usize },
    #[error("unknown {what} kind '{name}'")]
    UnknownKind { what: &'static str, name: String },
    #[error("invalid env config: {0}")]
    Config(String),
    #[error("step called before reset")]
    NotReset,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("replay is empty: missing header record")]
    MissingHeader,
    #[error("malformed header record: {0}")]
    Header(String),
    #[error("malformed frame at index {index}: {message}")]
    Frame { index: usize, message: String },
}
