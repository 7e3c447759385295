//! Batch harnesses: controller evaluation, speed measurement, fundamental
//! diagram sweeps and replay recording.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::controllers::{make_controller, ControlContext, Controller, ControllerConfig, ControllerKind};
use crate::engine::{Engine, EngineConfig};
use crate::error::ScenarioError;
use crate::frame::{Geometry, ReplayWriter, StateFrame};
use crate::network::{compile, LinkSpec, MovementSpec, NetworkSpec, NodeSpec};
use crate::parallel::Execution;
use crate::scenarios::{ScenarioDefinition, CAPACITY, CELL, DT, FREE_FLOW_SPEED, JAM_DENSITY, WAVE_SPEED};

/// How a controller is driven during evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub controller: ControllerConfig,
    pub seconds: usize,
    /// Steps between controller decisions.
    pub decision_interval: usize,
    /// Start-up lost time; only applied when `mesoscopic` is set.
    pub lost_time: f64,
    pub mesoscopic: bool,
}

impl EvalOptions {
    pub fn new(kind: ControllerKind) -> Self {
        Self {
            controller: ControllerConfig::new(kind),
            seconds: 3600,
            decision_interval: 1,
            lost_time: 2.0,
            mesoscopic: false,
        }
    }

    pub fn mesoscopic(mut self, on: bool) -> Self {
        self.mesoscopic = on;
        self
    }

    pub fn engine_config(&self, seed: u64) -> EngineConfig {
        if self.mesoscopic {
            EngineConfig::mesoscopic(self.lost_time, seed)
        } else {
            EngineConfig { seed, ..EngineConfig::default() }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: String,
    pub controller: String,
    pub seed: u64,
    /// Vehicles that left the network.
    pub throughput: f64,
    /// Mean delay per injected vehicle, seconds.
    pub delay: f64,
    /// Mean total queue over the run, vehicles.
    pub queue: f64,
    pub injected: f64,
    pub ledger_error: f64,
    pub wall_s: f64,
    pub steps_per_s: f64,
}

/// Engine plus controller plus the context the controller was built from.
pub struct Simulation {
    pub engine: Engine,
    pub controller: Box<dyn Controller>,
    pub context: ControlContext,
    pub decision_interval: usize,
    requests: Vec<usize>,
}

impl Simulation {
    pub fn new(def: &ScenarioDefinition, controller: &ControllerConfig, engine: EngineConfig, decision_interval: usize) -> Result<Self, ScenarioError> {
        let net = def.compile()?;
        let rates = def.rates_for(&net)?;
        let context = ControlContext { rates: rates.clone(), corridors: def.corridors.clone() };
        let ctrl = make_controller(controller, &net, &context)?;
        let engine = Engine::new(net, rates, engine)?;
        let requests = engine.hold_requests();
        Ok(Self { engine, controller: ctrl, context, decision_interval: decision_interval.max(1), requests })
    }

    /// Swaps the decision function, keeping the simulation state.
    pub fn set_controller(&mut self, config: &ControllerConfig) -> Result<(), crate::error::ControllerError> {
        self.controller = make_controller(config, self.engine.network(), &self.context)?;
        Ok(())
    }

    pub fn is_decision_boundary(&self) -> bool {
        self.engine.state().steps.is_multiple_of(self.decision_interval as u64)
    }

    /// One engine step, consulting the controller on decision boundaries.
    pub fn step(&mut self) -> &crate::engine::StepMetrics {
        if self.is_decision_boundary() {
            self.controller.decide(&self.engine, &mut self.requests);
        }
        self.engine.step(&self.requests).expect("controllers only request valid phases")
    }

    pub fn requests(&self) -> &[usize] {
        &self.requests
    }
}

/// Runs one seed of `def` under `opts`.
pub fn run_once(def: &ScenarioDefinition, opts: &EvalOptions, seed: u64) -> Result<RunResult, ScenarioError> {
    let mut sim = Simulation::new(def, &opts.controller, opts.engine_config(seed), opts.decision_interval)?;
    let steps = steps_for(opts.seconds, sim.engine.network().dt);
    let start = Instant::now();
    let mut queue_sum = 0.0;
    for _ in 0..steps {
        queue_sum += sim.step().total_queue;
    }
    let wall = start.elapsed().as_secs_f64();
    let st = sim.engine.state();
    Ok(RunResult {
        scenario: def.name.clone(),
        controller: opts.controller.kind.name().into(),
        seed,
        throughput: st.cumulative_exited,
        delay: if st.cumulative_injected > 0.0 { st.cumulative_delay / st.cumulative_injected } else { 0.0 },
        queue: queue_sum / steps.max(1) as f64,
        injected: st.cumulative_injected,
        ledger_error: st.ledger_error(),
        wall_s: wall,
        steps_per_s: steps as f64 / wall.max(1e-12),
    })
}

fn steps_for(seconds: usize, dt: f64) -> usize {
    (seconds as f64 / dt).round() as usize
}

/// Runs one seed and writes a replay (geometry header plus one frame per
/// step) to `out`. Returns the number of frames written.
pub fn record<W: Write>(def: &ScenarioDefinition, opts: &EvalOptions, seed: u64, out: W) -> Result<u64, std::io::Error> {
    let mut sim = Simulation::new(def, &opts.controller, opts.engine_config(seed), opts.decision_interval)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string()))?;
    let mut geometry = Geometry::of(sim.engine.network(), &def.name);
    geometry.controller = Some(opts.controller.kind.name().into());
    let mut w = ReplayWriter::new(out, geometry)?;
    for _ in 0..steps_for(opts.seconds, sim.engine.network().dt) {
        sim.step();
        w.write(StateFrame::capture(&sim.engine))?;
    }
    let frames = w.frames();
    w.finish()?;
    Ok(frames)
}

/// [`record`] into a file, creating or truncating it.
pub fn record_to_file(def: &ScenarioDefinition, opts: &EvalOptions, seed: u64, path: &Path) -> Result<u64, ScenarioError> {
    let io = |source| ScenarioError::Io { path: path.display().to_string(), source };
    Simulation::new(def, &opts.controller, opts.engine_config(seed), opts.decision_interval)?;
    let file = std::fs::File::create(path).map_err(io)?;
    record(def, opts, seed, std::io::BufWriter::new(file)).map_err(io)
}

/// Runs every seed, results sorted by seed.
pub fn run_seeds(def: &ScenarioDefinition, opts: &EvalOptions, seeds: &[u64], exec: Execution) -> Result<Vec<RunResult>, ScenarioError> {
    let mut out = exec.map(seeds, |&s| run_once(def, opts, s)).into_iter().collect::<Result<Vec<_>, _>>()?;
    out.sort_by_key(|r| r.seed);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    pub scenario: String,
    pub intersections: usize,
    pub cells: usize,
    pub steps: usize,
    pub wall_s: f64,
    pub steps_per_s: f64,
    /// Simulated seconds per wall second.
    pub speedup: f64,
}

/// Times `steps` engine steps under fixed-time control.
pub fn speed(def: &ScenarioDefinition, steps: usize) -> Result<SpeedReport, ScenarioError> {
    let mut sim = Simulation::new(def, &ControllerConfig::new(ControllerKind::Fixed), EngineConfig::default(), 1)?;
    let net = sim.engine.network().clone();
    // Warm caches before timing.
    for _ in 0..steps.min(200) {
        sim.step();
    }
    sim.engine.reset(0);
    let start = Instant::now();
    for _ in 0..steps {
        sim.step();
    }
    let wall = start.elapsed().as_secs_f64().max(1e-12);
    let sps = steps as f64 / wall;
    Ok(SpeedReport {
        scenario: def.name.clone(),
        intersections: net.n_signals(),
        cells: net.n_cells(),
        steps,
        wall_s: wall,
        steps_per_s: sps,
        speedup: sps * net.dt,
    })
}

/// One steady-state sample of the fundamental diagram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FdPoint {
    /// Demand level, veh/s.
    pub demand: f64,
    /// Density, veh/m/lane.
    pub k: f64,
    /// Flow, veh/s/lane.
    pub q: f64,
    pub congested: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub n: usize,
}

/// Ordinary least squares.
pub fn fit_line(points: &[(f64, f64)]) -> LineFit {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - (slope * p.0 + intercept)).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    LineFit { slope, intercept, r2, n: points.len() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub points: Vec<FdPoint>,
    pub free_flow: LineFit,
    pub congested: LineFit,
    /// Critical point (k, q): maximum sampled flow and the density at which
    /// the free-flow fit reaches it.
    pub critical: (f64, f64),
}

pub const FD_WARMUP: usize = 2000;
pub const FD_AVERAGE: usize = 1000;
const FD_LINK_CELLS: u32 = 40;

/// A single long link feeding a throttled unsignalized junction and a sink.
fn fd_network(throttle: f64) -> NetworkSpec {
    let link = |id: &str, from: &str, to: &str, cells: u32, origin: bool, sink: bool| LinkSpec {
        id: id.into(),
        from_node: from.into(),
        to_node: to.into(),
        length: cells as f64 * CELL,
        lanes: 1,
        free_flow_speed: FREE_FLOW_SPEED,
        wave_speed: WAVE_SPEED,
        jam_density: JAM_DENSITY,
        capacity: CAPACITY,
        is_origin: origin,
        is_sink: sink,
        geometry: None,
        extra: Default::default(),
    };
    let node = |id: &str, x: f64| NodeSpec {
        id: id.into(),
        x,
        y: 0.0,
        signalized: false,
        phases: vec![],
        yellow_time: 3.0,
        all_red: 2.0,
        extra: Default::default(),
    };
    NetworkSpec {
        dt: DT,
        nodes: vec![node("o", 0.0), node("j", FD_LINK_CELLS as f64 * CELL), node("d", (FD_LINK_CELLS + 2) as f64 * CELL)],
        links: vec![link("road", "o", "j", FD_LINK_CELLS, true, false), link("exit", "j", "d", 2, false, true)],
        movements: vec![MovementSpec {
            id: None,
            from_link: "road".into(),
            to_link: "exit".into(),
            turn_ratio: 1.0,
            saturation_rate: throttle,
            node: "j".into(),
            extra: Default::default(),
        }],
        metadata: Default::default(),
        extra: Default::default(),
    }
}

/// Drives the link to steady state at one demand level and samples the middle cells.
pub fn fd_point(demand: f64) -> FdPoint {
    let congested = demand > CAPACITY;
    // Above capacity the demand level sets how hard the exit is throttled,
    // which pins the steady queue density on the congested branch.
    let (inflow, throttle) = if congested { (CAPACITY, (2.0 * CAPACITY - demand).max(1e-9)) } else { (demand, CAPACITY) };
    let net = Arc::new(compile(&fd_network(throttle)).expect("fd network is valid"));
    let mut engine = Engine::new(net.clone(), vec![inflow], EngineConfig::default()).expect("valid engine");
    for _ in 0..FD_WARMUP {
        engine.step(&[]).expect("no signals");
    }
    let road = &net.links[0];
    // The queue grows back from the junction, so the downstream half reaches steady state first.
    let mid = (road.first_cell + road.n_cells / 2) as usize..(road.last_cell() - 1) as usize;
    let (mut k_sum, mut q_sum) = (0.0, 0.0);
    for _ in 0..FD_AVERAGE {
        engine.step(&[]).expect("no signals");
        for c in mid.clone() {
            k_sum += engine.density(c);
            q_sum += engine.cell_outflows()[c] / (net.dt * net.cell_lanes[c]);
        }
    }
    let samples = (FD_AVERAGE * mid.len()) as f64;
    FdPoint { demand, k: k_sum / samples, q: q_sum / samples, congested }
}

/// Sweeps `levels` demand levels evenly from 0 to twice capacity.
pub fn fundamental_diagram(levels: usize, exec: Execution) -> FdReport {
    let levels = levels.max(2);
    let demands: Vec<f64> = (0..levels).map(|i| 2.0 * CAPACITY * i as f64 / (levels - 1) as f64).collect();
    let points = exec.map(&demands, |&d| fd_point(d));
    let branch = |cong: bool| -> Vec<(f64, f64)> {
        points
            .iter()
            .filter(|p| p.congested == cong && p.demand != CAPACITY)
            .map(|p| (p.k, p.q))
            .collect()
    };
    let free_flow = fit_line(&branch(false));
    let congested = fit_line(&branch(true));
    // The apex is where the free-flow line reaches the highest sustained flow.
    let q = points.iter().map(|p| p.q).fold(0.0, f64::max);
    let k = (q - free_flow.intercept) / free_flow.slope;
    FdReport { points, free_flow, congested, critical: (k, q) }
}
