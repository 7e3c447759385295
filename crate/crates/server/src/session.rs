use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use cellflow_core::controllers::make_controller;
use cellflow_core::frame::{read_replay_prefix, Ack, End, ErrorMessage};
use cellflow_core::runner::Simulation;
use cellflow_core::scenarios::DEFAULT_DECISION_INTERVAL;
use cellflow_core::{
    Command, ControllerConfig, ControllerKind, Engine, EngineConfig, Geometry, Registry, ReplayError, ServerMessage, StateFrame,
};

use crate::VizError;

pub const MAX_SPEED: f64 = 1000.0;

/// What a live session simulates.
#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub scenario: String,
    pub controller: ControllerConfig,
    /// Steps between controller decisions; controller swaps land on these boundaries.
    pub decision_interval: usize,
    pub mesoscopic: bool,
    pub lost_time: f64,
    pub seed: u64,
    pub registry: Registry,
}

impl LiveConfig {
    pub fn new(scenario: impl Into<String>, controller: ControllerKind) -> Self {
        Self {
            scenario: scenario.into(),
            controller: ControllerConfig::new(controller),
            decision_interval: DEFAULT_DECISION_INTERVAL,
            mesoscopic: false,
            lost_time: 2.0,
            seed: 0,
            registry: Registry::builtin(),
        }
    }

    fn engine_config(&self, seed: u64) -> EngineConfig {
        if self.mesoscopic {
            EngineConfig::mesoscopic(self.lost_time, seed)
        } else {
            EngineConfig { seed, ..EngineConfig::default() }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Source {
    Live(LiveConfig),
    Replay(PathBuf),
}

/// Outcome of a command: a message for the issuing client and messages for everyone.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub to_sender: ServerMessage,
    pub broadcast: Vec<ServerMessage>,
}

impl Reply {
    fn ack(cmd: &Command, applied_at_t: f64) -> Self {
        Self { to_sender: ServerMessage::Ack(Ack { cmd: cmd.name().into(), ok: true, applied_at_t }), broadcast: vec![] }
    }

    fn error(cmd: &Command, message: impl Into<String>) -> Self {
        Self {
            to_sender: ServerMessage::Error(ErrorMessage { cmd: Some(cmd.name().into()), message: message.into() }),
            broadcast: vec![],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Advance {
    Frame(StateFrame),
    /// Playback is over; these close the stream.
    Finished(Vec<ServerMessage>),
}

struct Live {
    config: LiveConfig,
    sim: Simulation,
    pending: Option<ControllerConfig>,
}

impl Live {
    fn start(config: LiveConfig, seed: u64) -> Result<Self, VizError> {
        let def = config.registry.make(&config.scenario)?;
        let sim = Simulation::new(&def, &config.controller, config.engine_config(seed), config.decision_interval)?;
        Ok(Self { config, sim, pending: None })
    }

    fn restart(&mut self, scenario: &str, seed: u64) -> Result<(), VizError> {
        let mut config = self.config.clone();
        config.scenario = scenario.into();
        if let Some(c) = self.pending.take() {
            config.controller = c;
        }
        *self = Self::start(config, seed)?;
        Ok(())
    }

    /// Simulation time of the first decision boundary at or after now.
    fn next_boundary_t(&self) -> f64 {
        let k = self.sim.decision_interval as u64;
        let steps = self.sim.engine.state().steps;
        (steps.div_ceil(k) * k) as f64 * self.sim.engine.network().dt
    }

    fn geometry(&self) -> Geometry {
        let mut g = Geometry::of(self.sim.engine.network(), &self.config.scenario);
        g.controller = Some(self.config.controller.kind.name().into());
        g.scenarios = self.config.registry.names();
        g.controllers = ControllerKind::ALL.iter().map(|k| k.name().to_string()).collect();
        g
    }

    fn step(&mut self) -> StateFrame {
        if self.sim.is_decision_boundary() {
            if let Some(c) = self.pending.take() {
                self.sim.set_controller(&c).expect("validated when latched");
                self.config.controller = c;
            }
        }
        self.sim.step();
        StateFrame::capture(&self.sim.engine)
    }
}

struct Playback {
    geometry: Geometry,
    frames: Vec<StateFrame>,
    failure: Option<ReplayError>,
    next: usize,
    done: bool,
}

enum Kind {
    Live(Box<Live>),
    Replay(Box<Playback>),
}

/// A simulation or recording plus its playback controls.
pub struct Session {
    kind: Kind,
    paused: bool,
    speed: f64,
}

impl Session {
    pub fn open(source: &Source) -> Result<Self, VizError> {
        let kind = match source {
            Source::Live(config) => Kind::Live(Box::new(Live::start(config.clone(), config.seed)?)),
            Source::Replay(path) => {
                let file = File::open(path).map_err(|e| ReplayError::Io { path: path.display().to_string(), source: e })?;
                let (replay, failure) = read_replay_prefix(BufReader::new(file))?;
                let mut geometry = replay.geometry;
                geometry.mode = "replay".into();
                Kind::Replay(Box::new(Playback { geometry, frames: replay.frames, failure, next: 0, done: false }))
            }
        };
        Ok(Self { kind, paused: false, speed: 1.0 })
    }

    pub fn geometry(&self) -> Geometry {
        match &self.kind {
            Kind::Live(l) => l.geometry(),
            Kind::Replay(p) => p.geometry.clone(),
        }
    }

    pub fn dt(&self) -> f64 {
        match &self.kind {
            Kind::Live(l) => l.sim.engine.network().dt,
            Kind::Replay(p) => p.geometry.dt,
        }
    }

    /// Simulation time of the latest state.
    pub fn t(&self) -> f64 {
        match &self.kind {
            Kind::Live(l) => l.sim.engine.state().clock,
            Kind::Replay(p) => p.next.checked_sub(1).map_or(0.0, |i| p.frames[i].t),
        }
    }

    pub fn is_live(&self) -> bool {
        matches!(self.kind, Kind::Live(_))
    }

    pub fn is_paused(&self) -> bool {
        self.paused
    }

    pub fn is_finished(&self) -> bool {
        matches!(&self.kind, Kind::Replay(p) if p.done)
    }

    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn set_speed(&mut self, speed: f64) -> Result<(), VizError> {
        if !(speed > 0.0 && speed <= MAX_SPEED) {
            return Err(VizError::Speed(speed));
        }
        self.speed = speed;
        Ok(())
    }

    /// The live engine, if this session simulates.
    pub fn engine(&self) -> Option<&Engine> {
        match &self.kind {
            Kind::Live(l) => Some(&l.sim.engine),
            Kind::Replay(_) => None,
        }
    }

    pub fn controller(&self) -> Option<&str> {
        match &self.kind {
            Kind::Live(l) => Some(l.config.controller.kind.name()),
            Kind::Replay(_) => None,
        }
    }

    /// Applies a command between steps.
    pub fn handle(&mut self, cmd: Command) -> Reply {
        let now = self.t();
        match &cmd {
            Command::Pause => {
                self.paused = true;
                Reply::ack(&cmd, now)
            }
            Command::Resume => {
                self.paused = false;
                Reply::ack(&cmd, now)
            }
            Command::SetSpeed { speed } => match self.set_speed(*speed) {
                Ok(()) => Reply::ack(&cmd, now),
                Err(e) => Reply::error(&cmd, e.to_string()),
            },
            Command::SetController { name } => {
                let Kind::Live(live) = &mut self.kind else {
                    return Reply::error(&cmd, "not available in replay mode");
                };
                let kind = match name.parse::<ControllerKind>() {
                    Ok(k) => k,
                    Err(e) => return Reply::error(&cmd, e.to_string()),
                };
                let config = ControllerConfig { kind, ..live.config.controller.clone() };
                if let Err(e) = make_controller(&config, live.sim.engine.network(), &live.sim.context) {
                    return Reply::error(&cmd, e.to_string());
                }
                live.pending = Some(config);
                Reply::ack(&cmd, live.next_boundary_t())
            }
            Command::SetScenario { name } => {
                let Kind::Live(live) = &mut self.kind else {
                    return Reply::error(&cmd, "not available in replay mode");
                };
                let seed = live.config.seed;
                if let Err(e) = live.restart(name, seed) {
                    return Reply::error(&cmd, e.to_string());
                }
                let mut reply = Reply::ack(&cmd, 0.0);
                reply.broadcast = vec![ServerMessage::Geometry(live.geometry()), ServerMessage::Frame(StateFrame::capture(&live.sim.engine))];
                reply
            }
            Command::Reset { seed } => {
                let Kind::Live(live) = &mut self.kind else {
                    return Reply::error(&cmd, "not available in replay mode");
                };
                let seed = seed.unwrap_or(live.config.seed);
                let scenario = live.config.scenario.clone();
                if let Err(e) = live.restart(&scenario, seed) {
                    return Reply::error(&cmd, e.to_string());
                }
                live.config.seed = seed;
                let mut reply = Reply::ack(&cmd, 0.0);
                reply.broadcast = vec![ServerMessage::Frame(StateFrame::capture(&live.sim.engine))];
                reply
            }
        }
    }

    /// Advances one step (or one recorded frame). `None` once a replay has ended.
    pub fn advance(&mut self) -> Option<Advance> {
        match &mut self.kind {
            Kind::Live(live) => Some(Advance::Frame(live.step())),
            Kind::Replay(p) if p.done => None,
            Kind::Replay(p) => {
                if let Some(f) = p.frames.get(p.next) {
                    p.next += 1;
                    return Some(Advance::Frame(f.clone()));
                }
                p.done = true;
                let mut out = Vec::new();
                if let Some(e) = p.failure.take() {
                    out.push(ServerMessage::Error(ErrorMessage { cmd: None, message: e.to_string() }));
                }
                let t = p.frames.last().map_or(0.0, |f| f.t);
                out.push(ServerMessage::End(End { t, frames: p.next as u64 }));
                Some(Advance::Finished(out))
            }
        }
    }
}
