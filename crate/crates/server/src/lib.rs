//! Dashboard server: runs a live simulation (or plays back a recording) and
//! streams it to browser clients over a WebSocket at `/ws`.
//!
//! [`Session`] holds the simulation and applies steering commands; it has no
//! I/O and can be driven directly. [`Server`] paces a session against the
//! wall clock and fans its messages out to every connected client.

mod server;
mod session;

pub use server::{serve, Server, ServerConfig, DEFAULT_MAX_FPS, DEFAULT_PORT};
pub use session::{Advance, LiveConfig, Reply, Session, Source, MAX_SPEED};

use cellflow_core::{ControllerError, ReplayError, ScenarioError};

#[derive(Debug, thiserror::Error)]
pub enum VizError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: std::net::SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error("speed must be in (0, {MAX_SPEED}], got {0}")]
    Speed(f64),
    #[error("frame rate cap must be positive, got {0}")]
    FrameRate(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
