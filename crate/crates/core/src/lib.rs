//! Cell Transmission Model traffic-signal simulation.
//!
//! [`network`] compiles a logical road network into flat arrays,
//! [`engine`] advances it one Δt at a time, [`controllers`] decide signal
//! phases, [`scenarios`] provides the built-in networks, [`env`] wraps the
//! engine as an episodic RL environment and [`runner`] holds the batch
//! harnesses (speed, fundamental diagram, controller evaluation, replay
//! recording).

pub mod controllers;
pub mod engine;
pub mod env;
pub mod error;
pub mod frame;
pub mod network;
pub mod parallel;
pub mod runner;
pub mod scenarios;

pub use controllers::{make_controller, ControlContext, Controller, ControllerConfig, ControllerKind};
pub use engine::{Engine, EngineConfig, Interim, SimState, StepMetrics};
pub use env::{ActionKind, Env, EnvConfig, ObsKind, RewardKind, VecEnv};
pub use frame::{Command, Geometry, ServerMessage, StateFrame};
pub use error::{ControllerError, EngineError, EnvError, NetworkError, ReplayError, ScenarioError};
pub use network::{compile, validate, CompiledNetwork, NetworkSpec};
pub use scenarios::{registry_make, Registry, ScenarioDefinition};
