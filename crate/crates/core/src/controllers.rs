//! Rule-based signal controllers.
//!
//! A controller looks at an [`Engine`] and writes one phase request per
//! signalized node. Adaptive controllers never request a change before the
//! current green has lasted `min_green`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Interim, NodeSignal};
use crate::error::ControllerError;
use crate::network::CompiledNetwork;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Fixed,
    Webster,
    Sotl,
    MaxPressure,
    LtMp,
    EffMp,
    GreenWave,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 7] = [
        ControllerKind::Fixed,
        ControllerKind::Webster,
        ControllerKind::Sotl,
        ControllerKind::MaxPressure,
        ControllerKind::LtMp,
        ControllerKind::EffMp,
        ControllerKind::GreenWave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Fixed => "fixed",
            ControllerKind::Webster => "webster",
            ControllerKind::Sotl => "sotl",
            ControllerKind::MaxPressure => "maxpressure",
            ControllerKind::LtMp => "ltmp",
            ControllerKind::EffMp => "effmp",
            ControllerKind::GreenWave => "greenwave",
        }
    }

    pub fn is_adaptive(self) -> bool {
        matches!(self, ControllerKind::Sotl | ControllerKind::MaxPressure | ControllerKind::LtMp | ControllerKind::EffMp)
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ControllerKind {
    type Err = ControllerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| ControllerError::Unknown(s.into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub min_green: f64,
    pub max_green: f64,
    /// Green slot per phase for fixed-time control, seconds (interim included).
    pub fixed_split: f64,
    /// SOTL accumulator threshold θ, veh·steps.
    pub sotl_threshold: f64,
    /// SOTL detection zone measured back from the stop line, meters.
    pub sotl_distance: f64,
    /// EfficientMP green extension per vehicle of pressure, s/veh.
    pub efficiency_gain: f64,
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind) -> Self {
        Self {
            kind,
            min_green: 5.0,
            max_green: 60.0,
            fixed_split: 30.0,
            sotl_threshold: 5.0,
            sotl_distance: 2.0 * 13.89,
            efficiency_gain: 1.0,
        }
    }

    pub fn with_min_green(mut self, min_green: f64) -> Self {
        self.min_green = min_green;
        self
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let times = [self.min_green, self.max_green, self.fixed_split, self.sotl_threshold, self.sotl_distance, self.efficiency_gain];
        if times.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
            return Err(ControllerError::Config("all parameters must be finite and >= 0".into()));
        }
        if self.min_green > self.max_green {
            return Err(ControllerError::Config(format!("min_green {} exceeds max_green {}", self.min_green, self.max_green)));
        }
        if self.fixed_split <= 0.0 {
            return Err(ControllerError::Config("fixed_split must be > 0".into()));
        }
        Ok(())
    }
}

/// What a controller may know about a scenario beyond live state.
#[derive(Debug, Clone, Default)]
pub struct ControlContext {
    /// Arrival rates aligned with `origin_links`.
    pub rates: Vec<f64>,
    /// Ordered node ids for green-wave coordination.
    pub corridors: Vec<Vec<String>>,
}

/// A signal controller. `decide` writes one phase index per signal slot.
pub trait Controller: Send {
    fn kind(&self) -> ControllerKind;
    fn decide(&mut self, engine: &Engine, out: &mut [usize]);
}

/// Builds a controller for `net`.
pub fn make_controller(
    config: &ControllerConfig,
    net: &CompiledNetwork,
    ctx: &ControlContext,
) -> Result<Box<dyn Controller>, ControllerError> {
    config.validate()?;
    let c = config.clone();
    Ok(match config.kind {
        ControllerKind::Fixed => Box::new(FixedTime::new(c, net)),
        ControllerKind::Webster => Box::new(Webster::new(c, net, &ctx.rates)),
        ControllerKind::Sotl => Box::new(Sotl::new(c, net)),
        ControllerKind::MaxPressure => Box::new(MaxPressure { config: c }),
        ControllerKind::LtMp => Box::new(LtAwareMp { config: c }),
        ControllerKind::EffMp => Box::new(EfficientMp::new(c, net)),
        ControllerKind::GreenWave => Box::new(GreenWave::new(c, net, &ctx.corridors)),
    })
}

/// Phase a node is on or heading to.
fn target(sig: &NodeSignal) -> usize {
    sig.pending_phase.unwrap_or(sig.current_phase)
}

/// Σ over the phase's movements of (upstream boundary cell − downstream boundary cell).
pub fn phase_pressure(net: &CompiledNetwork, vehicles: &[f64], slot: usize, phase: usize) -> f64 {
    net.signal_node(slot).phase_movements[phase]
        .iter()
        .map(|&m| vehicles[net.mv_up_cell[m as usize] as usize] - vehicles[net.mv_down_cell[m as usize] as usize])
        .sum()
}

/// Phase with maximal pressure; ties keep `current` when it is among the
/// maxima, otherwise go to the lowest index.
pub fn argmax_pressure(pressures: &[f64], current: usize) -> usize {
    let best = pressures.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if pressures[current] == best {
        return current;
    }
    pressures.iter().position(|&p| p == best).unwrap_or(current)
}

/// Phase index for a cycle of per-phase slots at cycle position `t`.
fn slot_phase(slots: &[f64], t: f64) -> usize {
    let cycle: f64 = slots.iter().sum();
    let mut tau = t.rem_euclid(cycle);
    for (p, &s) in slots.iter().enumerate() {
        if tau < s {
            return p;
        }
        tau -= s;
    }
    slots.len() - 1
}

/// `floor((t mod n·g) / g)`.
pub fn fixed_time_phase(n_phases: usize, green: f64, t: f64) -> usize {
    ((t.rem_euclid(n_phases as f64 * green) / green).floor() as usize).min(n_phases - 1)
}

pub struct FixedTime {
    config: ControllerConfig,
    n_phases: Vec<usize>,
}

impl FixedTime {
    fn new(config: ControllerConfig, net: &CompiledNetwork) -> Self {
        let n_phases = (0..net.n_signals()).map(|s| net.signal_node(s).n_phases).collect();
        Self { config, n_phases }
    }
}

impl Controller for FixedTime {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Fixed
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let t = engine.state().clock;
        for (o, &n) in out.iter_mut().zip(&self.n_phases) {
            *o = fixed_time_phase(n, self.config.fixed_split, t);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WebsterPlan {
    pub cycle: f64,
    /// Effective green per phase.
    pub greens: Vec<f64>,
    pub lost_time: f64,
    /// Critical flow ratio sum; ≥ 1 means the plan fell back to the maximum cycle.
    pub y_total: f64,
    pub oversaturated: bool,
}

impl WebsterPlan {
    /// Slot lengths (green + interim) in phase order; they sum to the cycle.
    pub fn slots(&self) -> Vec<f64> {
        let interim = self.lost_time / self.greens.len() as f64;
        self.greens.iter().map(|g| g + interim).collect()
    }
}

pub const WEBSTER_MIN_CYCLE: f64 = 40.0;
pub const WEBSTER_MAX_CYCLE: f64 = 180.0;

/// Webster cycle and splits from per-phase critical flow ratios `y`.
pub fn webster_plan(y: &[f64], lost_time: f64) -> WebsterPlan {
    let y_total: f64 = y.iter().sum();
    let oversaturated = y_total >= 1.0;
    let cycle = if oversaturated {
        WEBSTER_MAX_CYCLE
    } else {
        ((1.5 * lost_time + 5.0) / (1.0 - y_total)).clamp(WEBSTER_MIN_CYCLE, WEBSTER_MAX_CYCLE)
    };
    let effective = cycle - lost_time;
    let greens = if y_total > 0.0 {
        y.iter().map(|yi| effective * yi / y_total).collect()
    } else {
        vec![effective / y.len() as f64; y.len()]
    };
    WebsterPlan { cycle, greens, lost_time, y_total, oversaturated }
}

/// Expected link flows from origin rates pushed through turn ratios.
pub fn expected_link_flows(net: &CompiledNetwork, rates: &[f64]) -> Vec<f64> {
    let mut inject = vec![0.0; net.links.len()];
    for (&li, &r) in net.origin_links.iter().zip(rates) {
        inject[li as usize] += r;
    }
    let mut flow = inject.clone();
    for _ in 0..200 {
        let mut next = inject.clone();
        for m in 0..net.n_movements() {
            next[net.mv_to_link[m] as usize] += net.mv_beta[m] * flow[net.mv_from_link[m] as usize];
        }
        let delta = next.iter().zip(&flow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        flow = next;
        if delta < 1e-12 {
            break;
        }
    }
    flow
}

pub struct Webster {
    plans: Vec<WebsterPlan>,
    slots: Vec<Vec<f64>>,
}

impl Webster {
    fn new(_config: ControllerConfig, net: &CompiledNetwork, rates: &[f64]) -> Self {
        let flows = expected_link_flows(net, rates);
        let mut plans = Vec::new();
        for slot in 0..net.n_signals() {
            let node = net.signal_node(slot);
            let y: Vec<f64> = node
                .phase_movements
                .iter()
                .map(|ms| {
                    ms.iter()
                        .map(|&m| {
                            let m = m as usize;
                            net.mv_beta[m] * flows[net.mv_from_link[m] as usize] / net.mv_sat[m]
                        })
                        .fold(0.0, f64::max)
                })
                .collect();
            let lost = node.n_phases as f64 * (node.yellow_time + node.all_red);
            plans.push(webster_plan(&y, lost));
        }
        let slots = plans.iter().map(WebsterPlan::slots).collect();
        Self { plans, slots }
    }

    pub fn plans(&self) -> &[WebsterPlan] {
        &self.plans
    }
}

impl Controller for Webster {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Webster
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let t = engine.state().clock;
        for (o, slots) in out.iter_mut().zip(&self.slots) {
            *o = slot_phase(slots, t);
        }
    }
}

pub struct Sotl {
    config: ControllerConfig,
    /// Per signal slot: incoming links with their detection cells and serving phases.
    approaches: Vec<Vec<Approach>>,
    kappa: Vec<Vec<f64>>,
}

struct Approach {
    cells: Vec<usize>,
    phase_mask: u64,
}

impl Sotl {
    fn new(config: ControllerConfig, net: &CompiledNetwork) -> Self {
        let mut approaches = Vec::new();
        for slot in 0..net.n_signals() {
            let node = net.signal_node(slot);
            let mut list = Vec::new();
            for &li in &node.incoming_links {
                let mask = node
                    .movements
                    .iter()
                    .filter(|&&m| net.mv_from_link[m as usize] == li)
                    .fold(0u64, |acc, &m| acc | net.mv_phase_mask[m as usize]);
                if mask == 0 {
                    continue;
                }
                let link = &net.links[li as usize];
                let zone = ((config.sotl_distance / link.cell_length).ceil() as u32).clamp(1, link.n_cells);
                let cells = (link.last_cell() + 1 - zone..=link.last_cell()).map(|c| c as usize).collect();
                list.push(Approach { cells, phase_mask: mask });
            }
            approaches.push(list);
        }
        let kappa = approaches.iter().map(|a| vec![0.0; a.len()]).collect();
        Self { config, approaches, kappa }
    }
}

impl Controller for Sotl {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Sotl
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let vehicles = &engine.state().vehicles;
        for (slot, o) in out.iter_mut().enumerate() {
            let sig = &engine.state().signal.nodes[slot];
            let current = target(sig);
            *o = current;
            let approaches = &self.approaches[slot];
            let kappa = &mut self.kappa[slot];
            for (a, k) in approaches.iter().zip(kappa.iter_mut()) {
                if a.phase_mask & (1 << current) == 0 {
                    *k += a.cells.iter().map(|&c| vehicles[c]).sum::<f64>();
                }
            }
            if sig.interim != Interim::Green || sig.green_elapsed < self.config.min_green {
                continue;
            }
            let red = |i: usize| approaches[i].phase_mask & (1 << current) == 0;
            let lowest_phase = |i: usize| approaches[i].phase_mask.trailing_zeros() as usize;
            let ready = (0..approaches.len())
                .filter(|&i| red(i) && kappa[i] >= self.config.sotl_threshold)
                .map(lowest_phase)
                .min();
            let forced = || {
                (0..approaches.len())
                    .filter(|&i| red(i) && kappa[i] > 0.0)
                    .max_by(|&a, &b| kappa[a].total_cmp(&kappa[b]).then(lowest_phase(b).cmp(&lowest_phase(a))))
                    .map(lowest_phase)
            };
            let next = match ready {
                Some(p) => Some(p),
                None if sig.green_elapsed >= self.config.max_green => forced(),
                None => None,
            };
            if let Some(p) = next {
                *o = p;
                for (a, k) in approaches.iter().zip(kappa.iter_mut()) {
                    if a.phase_mask & (1 << p) != 0 {
                        *k = 0.0;
                    }
                }
            }
        }
    }
}

fn pressures(engine: &Engine, slot: usize, buf: &mut Vec<f64>) {
    let net = engine.network();
    buf.clear();
    buf.extend((0..net.signal_node(slot).n_phases).map(|p| phase_pressure(net, &engine.state().vehicles, slot, p)));
}

pub struct MaxPressure {
    config: ControllerConfig,
}

impl Controller for MaxPressure {
    fn kind(&self) -> ControllerKind {
        ControllerKind::MaxPressure
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let mut buf = Vec::new();
        for (slot, o) in out.iter_mut().enumerate() {
            let sig = &engine.state().signal.nodes[slot];
            *o = target(sig);
            if sig.interim != Interim::Green || sig.green_elapsed < self.config.min_green {
                continue;
            }
            pressures(engine, slot, &mut buf);
            *o = argmax_pressure(&buf, sig.current_phase);
        }
    }
}

/// Pressure gain (vehicles) a switch must beat: the interim plus half the
/// lost time, converted at the current phase's mean saturation rate.
pub fn switch_cost(yellow: f64, all_red: f64, lost_time: f64, mean_saturation: f64) -> f64 {
    (yellow + all_red + lost_time / 2.0) * mean_saturation
}

pub struct LtAwareMp {
    config: ControllerConfig,
}

impl Controller for LtAwareMp {
    fn kind(&self) -> ControllerKind {
        ControllerKind::LtMp
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let net = engine.network();
        let lost_time = engine.config().lost_time;
        let mut buf = Vec::new();
        for (slot, o) in out.iter_mut().enumerate() {
            let sig = &engine.state().signal.nodes[slot];
            *o = target(sig);
            if sig.interim != Interim::Green || sig.green_elapsed < self.config.min_green {
                continue;
            }
            pressures(engine, slot, &mut buf);
            let cur = sig.current_phase;
            let best = argmax_pressure(&buf, cur);
            if best == cur {
                continue;
            }
            let node = net.signal_node(slot);
            let ms = &node.phase_movements[cur];
            let mean_sat = ms.iter().map(|&m| net.mv_sat[m as usize]).sum::<f64>() / ms.len().max(1) as f64;
            if buf[best] - buf[cur] > switch_cost(node.yellow_time, node.all_red, lost_time, mean_sat) {
                *o = best;
            }
        }
    }
}

/// Green length EfficientMP plans for a phase entered at `pressure`.
pub fn planned_green(min_green: f64, max_green: f64, gain: f64, pressure: f64) -> f64 {
    (min_green + gain * pressure).clamp(min_green, max_green)
}

pub struct EfficientMp {
    config: ControllerConfig,
    /// Per slot: (phase, green_elapsed at which the plan expires).
    plan: Vec<Option<(usize, f64)>>,
}

impl EfficientMp {
    fn new(config: ControllerConfig, net: &CompiledNetwork) -> Self {
        Self { config, plan: vec![None; net.n_signals()] }
    }
}

impl Controller for EfficientMp {
    fn kind(&self) -> ControllerKind {
        ControllerKind::EffMp
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let net = engine.network();
        let c = &self.config;
        for (slot, o) in out.iter_mut().enumerate() {
            let sig = &engine.state().signal.nodes[slot];
            *o = target(sig);
            if sig.interim != Interim::Green {
                continue;
            }
            let cur = sig.current_phase;
            let vehicles = &engine.state().vehicles;
            let expires = match self.plan[slot] {
                Some((p, until)) if p == cur => until,
                _ => {
                    let g = planned_green(c.min_green, c.max_green, c.efficiency_gain, phase_pressure(net, vehicles, slot, cur));
                    self.plan[slot] = Some((cur, sig.green_elapsed + g));
                    sig.green_elapsed + g
                }
            };
            if sig.green_elapsed < expires {
                continue;
            }
            let ps: Vec<f64> = (0..net.signal_node(slot).n_phases).map(|p| phase_pressure(net, vehicles, slot, p)).collect();
            let best = argmax_pressure(&ps, cur);
            if best == cur {
                let g = planned_green(c.min_green, c.max_green, c.efficiency_gain, ps[cur]);
                self.plan[slot] = Some((cur, sig.green_elapsed + g));
            } else {
                self.plan[slot] = None;
                *o = best;
            }
        }
    }
}

/// Offset per node: cumulative corridor distance over `vf`, wrapped into the cycle.
/// Nodes on no corridor get 0.
pub fn green_wave_offsets(net: &CompiledNetwork, corridors: &[Vec<String>], cycle: f64) -> Vec<f64> {
    let mut offsets = vec![0.0; net.n_signals()];
    let slot_of: HashMap<&str, usize> = (0..net.n_signals()).map(|s| (net.signal_node(s).id.as_str(), s)).collect();
    let default_vf = net.links.first().map(|l| l.free_flow_speed).unwrap_or(1.0);
    for corridor in corridors {
        let mut dist = 0.0;
        let mut prev: Option<&str> = None;
        for id in corridor {
            let Some(&slot) = slot_of.get(id.as_str()) else { continue };
            let node = net.signal_node(slot);
            let mut vf = default_vf;
            if let Some(p) = prev {
                let pn = &net.nodes[net.node_index(p).expect("corridor node exists") as usize];
                let (dx, dy) = (node.position[0] - pn.position[0], node.position[1] - pn.position[1]);
                if let Some(&li) = pn.outgoing_links.iter().find(|&&l| net.links[l as usize].to_node as usize == net.node_index(id).unwrap() as usize) {
                    vf = net.links[li as usize].free_flow_speed;
                }
                dist += (dx * dx + dy * dy).sqrt() / vf;
            }
            offsets[slot] = dist.rem_euclid(cycle);
            prev = Some(id.as_str());
        }
    }
    offsets
}

pub struct GreenWave {
    config: ControllerConfig,
    n_phases: Vec<usize>,
    offsets: Vec<f64>,
}

impl GreenWave {
    fn new(config: ControllerConfig, net: &CompiledNetwork, corridors: &[Vec<String>]) -> Self {
        let n_phases: Vec<usize> = (0..net.n_signals()).map(|s| net.signal_node(s).n_phases).collect();
        let cycle = n_phases.iter().copied().max().unwrap_or(2) as f64 * config.fixed_split;
        let offsets = green_wave_offsets(net, corridors, cycle);
        Self { config, n_phases, offsets }
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }
}

impl Controller for GreenWave {
    fn kind(&self) -> ControllerKind {
        ControllerKind::GreenWave
    }

    fn decide(&mut self, engine: &Engine, out: &mut [usize]) {
        let t = engine.state().clock;
        for (slot, o) in out.iter_mut().enumerate() {
            *o = fixed_time_phase(self.n_phases[slot], self.config.fixed_split, t - self.offsets[slot]);
        }
    }
}
