//! The CTM step kernel.
//!
//! State is kept as vehicles per cell rather than density: with Δx = v_f·Δt
//! the free-flow sending term `v_f·k·ℓ·Δt` is exactly the cell's vehicle
//! count, so the step works in vehicle units throughout and densities are
//! derived on demand.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::EngineError;
use crate::network::{CompiledNetwork, NONE};

/// Environment variable that turns on per-step invariant assertions.
pub const DEBUG_ENV: &str = "CELLFLOW_DEBUG_INVARIANTS";

const INVARIANT_TOL: f64 = 1e-9;

/// Sending flow (veh/s) of a cell at density `k`.
pub fn sending_flow(k: f64, vf: f64, q: f64, lanes: f64) -> f64 {
    (vf * k).min(q) * lanes
}

/// Receiving flow (veh/s) of a cell at density `k`.
pub fn receiving_flow(k: f64, w: f64, kj: f64, q: f64, lanes: f64) -> f64 {
    q.min(w * (kj - k)) * lanes
}

/// Start-up lost-time ramp: the fraction of capacity available `t - t_green`
/// seconds into a green.
pub fn capacity_factor(t: f64, t_green: f64, lost_time: f64) -> f64 {
    if lost_time > 0.0 {
        ((t - t_green) / lost_time).clamp(0.0, 1.0)
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Start-up lost time τ_L, seconds.
    pub lost_time: f64,
    /// Poisson arrivals instead of deterministic `r·Δt`.
    pub stochastic: bool,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { lost_time: 0.0, stochastic: false, seed: 0 }
    }
}

impl EngineConfig {
    pub fn mesoscopic(lost_time: f64, seed: u64) -> Self {
        Self { lost_time, stochastic: true, seed }
    }

    pub fn uses_mesoscopic_paths(&self) -> bool {
        self.lost_time > 0.0 || self.stochastic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interim {
    Green,
    Yellow,
    AllRed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSignal {
    pub current_phase: usize,
    pub interim: Interim,
    /// Seconds left in the current yellow or all-red interval.
    pub interim_timer: f64,
    /// Seconds the current phase has been green, as of the current clock.
    pub green_elapsed: f64,
    pub pending_phase: Option<usize>,
    pub switches: u64,
    /// `green_elapsed` at the moment the most recent switch was requested.
    pub last_green_duration: f64,
}

impl NodeSignal {
    fn new() -> Self {
        Self {
            current_phase: 0,
            interim: Interim::Green,
            interim_timer: 0.0,
            green_elapsed: 0.0,
            pending_phase: None,
            switches: 0,
            last_green_duration: 0.0,
        }
    }

    /// Phase bitmask of movements currently allowed to flow.
    pub fn active_mask(&self) -> u64 {
        match self.interim {
            Interim::Green => 1u64 << self.current_phase,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SignalState {
    /// One entry per signalized node, indexed by signal slot.
    pub nodes: Vec<NodeSignal>,
    /// Per movement: clock time its current or most recent green began.
    pub last_green_start: Vec<f64>,
}

/// Neumaier running sum; keeps the ledger exact to a few ulps over long runs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

#[derive(Debug, Clone)]
pub struct SimState {
    /// Vehicles per cell.
    pub vehicles: Vec<f64>,
    pub steps: u64,
    pub clock: f64,
    /// Per origin link (aligned with `CompiledNetwork::origin_links`).
    pub origin_queue: Vec<f64>,
    pub cumulative_exited: f64,
    pub cumulative_injected: f64,
    pub cumulative_delay: f64,
    pub rng: ChaCha8Rng,
    pub signal: SignalState,
    injected: CompensatedSum,
    exited: CompensatedSum,
}

impl SimState {
    fn fresh(net: &CompiledNetwork, seed: u64) -> Self {
        Self {
            vehicles: vec![0.0; net.n_cells()],
            steps: 0,
            clock: 0.0,
            origin_queue: vec![0.0; net.origin_links.len()],
            cumulative_exited: 0.0,
            cumulative_injected: 0.0,
            cumulative_delay: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            signal: SignalState {
                nodes: (0..net.n_signals()).map(|_| NodeSignal::new()).collect(),
                last_green_start: vec![0.0; net.n_movements()],
            },
            injected: CompensatedSum::default(),
            exited: CompensatedSum::default(),
        }
    }

    fn inject(&mut self, x: f64) {
        self.injected.add(x);
        self.cumulative_injected = self.injected.value();
    }

    fn exit(&mut self, x: f64) {
        self.exited.add(x);
        self.cumulative_exited = self.exited.value();
    }

    pub fn vehicles_in_network(&self) -> f64 {
        self.vehicles.iter().sum()
    }

    pub fn vehicles_queued(&self) -> f64 {
        self.origin_queue.iter().sum()
    }

    /// `injected − (in network + origin-queued + exited)`.
    pub fn ledger_error(&self) -> f64 {
        let mut held: CompensatedSum = self.vehicles.iter().chain(&self.origin_queue).copied().collect();
        held.add(self.exited.sum);
        held.add(self.exited.comp);
        let mut err = self.injected;
        err.add(-held.sum);
        err.add(-held.comp);
        err.value()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub total_queue: f64,
    pub throughput_increment: f64,
    /// veh·s.
    pub delay_increment: f64,
    /// m/s, flow-weighted over cells that discharged this step.
    pub mean_speed: f64,
    pub per_node_queue: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Scratch {
    send: Vec<f64>,
    recv: Vec<f64>,
    inflow: Vec<f64>,
    outflow: Vec<f64>,
    mv_flow: Vec<f64>,
    /// Per cell: Σ movement demand into it (only meaningful at merge cells).
    merge_sum: Vec<f64>,
    /// Per cell: Σ movement demand out of it (only meaningful at diverge cells).
    diverge_sum: Vec<f64>,
    active: Vec<u64>,
}

/// One simulation: a compiled network, its demand, and evolving state.
#[derive(Debug, Clone)]
pub struct Engine {
    net: Arc<CompiledNetwork>,
    config: EngineConfig,
    rates: Vec<f64>,
    poisson: Vec<Option<Poisson<f64>>>,
    merge_cells: Vec<u32>,
    diverge_cells: Vec<u32>,
    intra_cells: Vec<u32>,
    sink_cells: Vec<u32>,
    origin_cells: Vec<u32>,
    state: SimState,
    metrics: StepMetrics,
    scratch: Scratch,
    debug: bool,
}

impl Engine {
    /// `rates` are arrival rates in veh/s aligned with `net.origin_links`.
    pub fn new(net: Arc<CompiledNetwork>, rates: Vec<f64>, config: EngineConfig) -> Result<Self, EngineError> {
        if rates.len() != net.origin_links.len() {
            return Err(EngineError::RequestCount { expected: net.origin_links.len(), got: rates.len() });
        }
        for (&r, &li) in rates.iter().zip(&net.origin_links) {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(EngineError::NegativeRate { link: net.links[li as usize].id.clone(), rate: r });
            }
        }
        if !(config.lost_time >= 0.0 && config.lost_time.is_finite()) {
            return Err(EngineError::LostTime(config.lost_time));
        }
        if cfg!(not(feature = "mesoscopic")) && config.uses_mesoscopic_paths() {
            return Err(EngineError::MesoscopicDisabled);
        }

        let dt = net.dt;
        let poisson = rates
            .iter()
            .map(|&r| if r > 0.0 { Poisson::new(r * dt).ok() } else { None })
            .collect();

        let mut merge_cells: Vec<u32> = net.mv_down_cell.clone();
        merge_cells.sort_unstable();
        merge_cells.dedup();
        let mut diverge_cells: Vec<u32> = net.mv_up_cell.clone();
        diverge_cells.sort_unstable();
        diverge_cells.dedup();
        let intra_cells = (0..net.n_cells() as u32).filter(|&c| net.cell_next[c as usize] != NONE).collect();
        let sink_cells = net.sink_links.iter().map(|&l| net.links[l as usize].last_cell()).collect();
        let origin_cells = net.origin_links.iter().map(|&l| net.links[l as usize].first_cell).collect();

        let n = net.n_cells();
        let scratch = Scratch {
            send: vec![0.0; n],
            recv: vec![0.0; n],
            inflow: vec![0.0; n],
            outflow: vec![0.0; n],
            mv_flow: vec![0.0; net.n_movements()],
            merge_sum: vec![0.0; n],
            diverge_sum: vec![0.0; n],
            active: vec![0; net.n_signals()],
        };
        let metrics = StepMetrics { per_node_queue: vec![0.0; net.n_signals()], ..Default::default() };
        let state = SimState::fresh(&net, config.seed);
        Ok(Self {
            debug: std::env::var_os(DEBUG_ENV).is_some_and(|v| !v.is_empty() && v != "0"),
            net,
            config,
            rates,
            poisson,
            merge_cells,
            diverge_cells,
            intra_cells,
            sink_cells,
            origin_cells,
            state,
            metrics,
            scratch,
        })
    }

    pub fn network(&self) -> &Arc<CompiledNetwork> {
        &self.net
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    /// Metrics of the most recent step.
    pub fn metrics(&self) -> &StepMetrics {
        &self.metrics
    }

    /// Per-movement vehicles moved in the most recent step.
    pub fn movement_flows(&self) -> &[f64] {
        &self.scratch.mv_flow
    }

    /// Per-cell vehicles that left each cell in the most recent step.
    pub fn cell_outflows(&self) -> &[f64] {
        &self.scratch.outflow
    }

    pub fn set_debug_invariants(&mut self, on: bool) {
        self.debug = on;
    }

    /// Back to an empty network at t = 0 with a reseeded generator.
    pub fn reset(&mut self, seed: u64) {
        self.config.seed = seed;
        self.state = SimState::fresh(&self.net, seed);
        self.metrics = StepMetrics { per_node_queue: vec![0.0; self.net.n_signals()], ..Default::default() };
    }

    pub fn density(&self, cell: usize) -> f64 {
        self.net.density_of(cell, self.state.vehicles[cell])
    }

    /// Requests that keep every signal on its current (or pending) phase.
    pub fn hold_requests(&self) -> Vec<usize> {
        self.state.signal.nodes.iter().map(|s| s.pending_phase.unwrap_or(s.current_phase)).collect()
    }

    /// Seeds a cell with vehicles, as injected demand so the ledger stays balanced.
    pub fn seed_vehicles(&mut self, cell: usize, vehicles: f64) {
        let add = vehicles.clamp(0.0, self.net.cell_jam_veh[cell] - self.state.vehicles[cell]);
        self.state.vehicles[cell] += add;
        self.state.inject(add);
    }

    /// Advances one Δt. `requests[slot]` is the phase wanted at each signalized node.
    pub fn step(&mut self, requests: &[usize]) -> Result<&StepMetrics, EngineError> {
        #[cfg(feature = "mesoscopic")]
        if self.config.uses_mesoscopic_paths() {
            return self.step_kernel::<true>(requests);
        }
        self.step_kernel::<false>(requests)
    }

    /// Steps with the lost-time and Poisson branches compiled in, whatever the config.
    #[cfg(feature = "mesoscopic")]
    #[doc(hidden)]
    pub fn step_mesoscopic_kernel(&mut self, requests: &[usize]) -> Result<&StepMetrics, EngineError> {
        self.step_kernel::<true>(requests)
    }

    /// Steps with the lost-time and Poisson branches compiled out.
    #[doc(hidden)]
    pub fn step_baseline_kernel(&mut self, requests: &[usize]) -> Result<&StepMetrics, EngineError> {
        if self.config.uses_mesoscopic_paths() {
            return Err(EngineError::MesoscopicDisabled);
        }
        self.step_kernel::<false>(requests)
    }

    /// Applies phase requests: starts the yellow → all-red interim on a
    /// change, ignores requests while an interim is running.
    pub fn update_signals(&mut self, requests: &[usize]) -> Result<(), EngineError> {
        let net = &*self.net;
        if requests.len() != net.n_signals() {
            return Err(EngineError::RequestCount { expected: net.n_signals(), got: requests.len() });
        }
        for (slot, &req) in requests.iter().enumerate() {
            let node = net.signal_node(slot);
            if req >= node.n_phases {
                return Err(EngineError::InvalidPhase { node: node.id.clone(), phase: req, n_phases: node.n_phases });
            }
        }
        let t = self.state.clock;
        for (slot, &req) in requests.iter().enumerate() {
            let sig = &mut self.state.signal.nodes[slot];
            if sig.interim == Interim::Green && req != sig.current_phase {
                let node = net.signal_node(slot);
                sig.last_green_duration = sig.green_elapsed;
                sig.switches += 1;
                sig.pending_phase = Some(req);
                sig.interim = Interim::Yellow;
                sig.interim_timer = node.yellow_time;
                settle(sig, node.all_red, t, &node.phase_movements, &mut self.state.signal.last_green_start);
            }
            self.scratch.active[slot] = sig.active_mask();
        }
        Ok(())
    }

    fn step_kernel<const MESO: bool>(&mut self, requests: &[usize]) -> Result<&StepMetrics, EngineError> {
        self.update_signals(requests)?;

        let net = &*self.net;
        let dt = net.dt;
        let t = self.state.clock;
        let lost_time = self.config.lost_time;
        let st = &mut self.state;
        let sc = &mut self.scratch;
        let n = &st.vehicles;

        #[allow(clippy::needless_range_loop)]
        for c in 0..n.len() {
            let cap = net.cell_cap_step[c];
            sc.send[c] = n[c].min(cap);
            sc.recv[c] = cap.min(net.cell_wave_ratio[c] * (net.cell_jam_veh[c] - n[c])).max(0.0);
            sc.inflow[c] = 0.0;
            sc.outflow[c] = 0.0;
        }

        // Movement demand.
        for &c in &self.merge_cells {
            sc.merge_sum[c as usize] = 0.0;
        }
        for &c in &self.diverge_cells {
            sc.diverge_sum[c as usize] = 0.0;
        }
        for m in 0..sc.mv_flow.len() {
            let slot = net.mv_signal_slot[m];
            let green = slot == NONE || net.mv_phase_mask[m] & sc.active[slot as usize] != 0;
            let d = if green {
                let up = net.mv_up_cell[m] as usize;
                let mut want = net.mv_beta[m] * sc.send[up];
                if MESO && slot != NONE {
                    want *= capacity_factor(t, st.signal.last_green_start[m], lost_time);
                }
                want.min(net.mv_sat[m] * dt)
            } else {
                0.0
            };
            sc.mv_flow[m] = d;
            sc.merge_sum[net.mv_down_cell[m] as usize] += d;
        }
        // Merge: scale contributors of an over-subscribed cell by a common factor.
        for m in 0..sc.mv_flow.len() {
            let down = net.mv_down_cell[m] as usize;
            let total = sc.merge_sum[down];
            if total > sc.recv[down] {
                sc.mv_flow[m] *= sc.recv[down] / total;
            }
            sc.diverge_sum[net.mv_up_cell[m] as usize] += sc.mv_flow[m];
        }
        // Diverge: never send more than the upstream cell holds.
        for m in 0..sc.mv_flow.len() {
            let up = net.mv_up_cell[m] as usize;
            let total = sc.diverge_sum[up];
            if total > sc.send[up] {
                sc.mv_flow[m] *= sc.send[up] / total;
            }
            let q = sc.mv_flow[m];
            sc.outflow[up] += q;
            sc.inflow[net.mv_down_cell[m] as usize] += q;
        }

        for &c in &self.intra_cells {
            let c = c as usize;
            let q = sc.send[c].min(sc.recv[c + 1]);
            sc.outflow[c] += q;
            sc.inflow[c + 1] += q;
        }

        let mut exited = 0.0;
        for &c in &self.sink_cells {
            let q = sc.send[c as usize];
            sc.outflow[c as usize] += q;
            exited += q;
        }

        let mut queued = 0.0;
        for (o, &c) in self.origin_cells.iter().enumerate() {
            let c = c as usize;
            let arrivals = if MESO && self.config.stochastic {
                match &self.poisson[o] {
                    Some(p) => p.sample(&mut st.rng),
                    None => 0.0,
                }
            } else {
                self.rates[o] * dt
            };
            st.inject(arrivals);
            let queue = st.origin_queue[o] + arrivals;
            let transfer = queue.min((sc.recv[c] - sc.inflow[c]).max(0.0));
            sc.inflow[c] += transfer;
            st.origin_queue[o] = queue - transfer;
            queued += st.origin_queue[o];
        }

        // Delay and speed are measured against this step's outflows.
        let mut delay = queued * dt;
        let mut flow_speed = 0.0;
        let mut flow_total = 0.0;
        let mut occupied = false;
        for c in 0..st.vehicles.len() {
            let v = st.vehicles[c];
            if v > 0.0 {
                occupied = true;
                let out = sc.outflow[c];
                delay += (v - out) * dt;
                flow_speed += out * (net.cell_vf[c] * out / v);
                flow_total += out;
            }
        }
        for c in 0..st.vehicles.len() {
            st.vehicles[c] += sc.inflow[c] - sc.outflow[c];
        }
        st.exit(exited);
        st.cumulative_delay += delay;

        let m = &mut self.metrics;
        m.throughput_increment = exited;
        m.delay_increment = delay;
        m.mean_speed = if flow_total > 0.0 {
            flow_speed / flow_total
        } else if occupied {
            0.0
        } else {
            net.cell_vf.first().copied().unwrap_or(0.0)
        };
        m.per_node_queue.iter_mut().for_each(|q| *q = 0.0);
        let mut total_queue = 0.0;
        for (i, &c) in net.queue_cells.iter().enumerate() {
            let v = st.vehicles[c as usize];
            if v >= net.cell_cap_step[c as usize] && v > 0.0 {
                m.per_node_queue[net.queue_cell_slot[i] as usize] += v;
                total_queue += v;
            }
        }
        m.total_queue = total_queue;

        st.steps += 1;
        st.clock = st.steps as f64 * dt;
        let now = st.clock;
        for (slot, sig) in st.signal.nodes.iter_mut().enumerate() {
            if sig.interim == Interim::Green {
                sig.green_elapsed += dt;
            } else {
                sig.interim_timer -= dt;
                let node = net.signal_node(slot);
                settle(sig, node.all_red, now, &node.phase_movements, &mut st.signal.last_green_start);
            }
        }

        if self.debug {
            self.check_invariants();
        }
        Ok(&self.metrics)
    }

    /// Panics if a cell left [0, jam] or the vehicle ledger is unbalanced.
    pub fn check_invariants(&self) {
        let st = &self.state;
        for (c, &v) in st.vehicles.iter().enumerate() {
            assert!(
                v >= -INVARIANT_TOL && v <= self.net.cell_jam_veh[c] + INVARIANT_TOL,
                "cell {c} holds {v} vehicles, outside [0, {}] at t={}",
                self.net.cell_jam_veh[c],
                st.clock
            );
        }
        let err = st.ledger_error();
        assert!(err.abs() < INVARIANT_TOL, "ledger off by {err} at t={}", st.clock);
    }
}

/// Moves a node through any interim intervals whose timers have run out.
fn settle(sig: &mut NodeSignal, all_red: f64, now: f64, phases: &[Vec<u32>], last_green_start: &mut [f64]) {
    const EPS: f64 = 1e-9;
    loop {
        match sig.interim {
            Interim::Green => return,
            _ if sig.interim_timer > EPS => return,
            Interim::Yellow => {
                sig.interim = Interim::AllRed;
                sig.interim_timer = all_red;
            }
            Interim::AllRed => {
                let next = sig.pending_phase.take().expect("interim always has a pending phase");
                sig.current_phase = next;
                sig.interim = Interim::Green;
                sig.interim_timer = 0.0;
                sig.green_elapsed = 0.0;
                for &m in &phases[next] {
                    last_green_start[m as usize] = now;
                }
            }
        }
    }
}
