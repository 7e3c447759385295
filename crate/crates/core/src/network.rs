//! Logical network model, validation, and compilation into flat arrays.
//!
//! A [`NetworkSpec`] is what users write (or load from JSON): nodes, links,
//! movements and signal phases addressed by string identifiers. [`compile`]
//! turns a valid spec into a [`CompiledNetwork`], a set of dense arrays the
//! engine iterates over. Every cell of a link is exactly `vf * dt` long, so
//! the CFL condition holds with equality everywhere.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::NetworkError;

/// Sentinel for "no intra-link downstream cell".
pub const NONE: u32 = u32::MAX;

/// Maximum number of phases per signalized node (phase membership is a `u64` mask).
pub const MAX_PHASES: usize = 64;

const BETA_TOLERANCE: f64 = 1e-9;

fn default_dt() -> f64 {
    1.0
}
fn default_yellow() -> f64 {
    3.0
}
fn default_all_red() -> f64 {
    2.0
}
fn default_lanes() -> u32 {
    1
}

/// A directed road link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub id: String,
    #[serde(rename = "from")]
    pub from_node: String,
    #[serde(rename = "to")]
    pub to_node: String,
    /// Meters.
    pub length: f64,
    #[serde(default = "default_lanes")]
    pub lanes: u32,
    /// Free-flow speed, m/s.
    #[serde(rename = "vf")]
    pub free_flow_speed: f64,
    /// Backward wave speed, m/s.
    #[serde(rename = "w")]
    pub wave_speed: f64,
    /// Jam density, veh/m/lane.
    #[serde(rename = "kj")]
    pub jam_density: f64,
    /// Capacity, veh/s/lane.
    #[serde(rename = "q")]
    pub capacity: f64,
    #[serde(rename = "origin", default)]
    pub is_origin: bool,
    #[serde(rename = "sink", default)]
    pub is_sink: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Vec<[f64; 2]>>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// A turning movement from the last cell of one link to the first cell of another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementSpec {
    /// Optional explicit identifier; defaults to `"{from_link}->{to_link}"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub from_link: String,
    pub to_link: String,
    #[serde(rename = "beta")]
    pub turn_ratio: f64,
    /// Saturation rate, veh/s.
    #[serde(rename = "sat")]
    pub saturation_rate: f64,
    pub node: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl MovementSpec {
    pub fn key(&self) -> String {
        match &self.id {
            Some(id) => id.clone(),
            None => format!("{}->{}", self.from_link, self.to_link),
        }
    }
}

/// Set of movements granted green together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSpec {
    pub movements: Vec<String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub signalized: bool,
    #[serde(default)]
    pub phases: Vec<PhaseSpec>,
    #[serde(rename = "yellow", default = "default_yellow")]
    pub yellow_time: f64,
    #[serde(default = "default_all_red")]
    pub all_red: f64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// The logical network as authored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkSpec>,
    pub movements: Vec<MovementSpec>,
    #[serde(default)]
    pub metadata: Map<String, Value>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

/// Which rule a diagnostic reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    DuplicateId,
    DanglingReference,
    NonPositive,
    WaveSpeed,
    CriticalDensity,
    TurnRatioRange,
    TurnRatioSum,
    MovementTopology,
    PhaseCount,
    EmptyPhase,
    PhaseOwnership,
    UnphasedMovement,
    UnsignalizedPhases,
    TooManyPhases,
    DeadEnd,
    SinkWithMovements,
    NoOrigin,
    NoSink,
}

/// One violated invariant, naming the offending entity.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostic {
    pub entity: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.entity, self.message)
    }
}

fn diag(out: &mut Vec<Diagnostic>, entity: String, rule: Rule, message: impl Into<String>) {
    out.push(Diagnostic {
        entity,
        rule,
        message: message.into(),
    });
}

/// Checks every structural invariant of `spec`. Empty result means valid.
pub fn validate(spec: &NetworkSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();

    if !(spec.dt > 0.0) {
        diag(&mut out, "network".into(), Rule::NonPositive, "dt must be > 0");
    }

    let mut node_ids = HashSet::new();
    for n in &spec.nodes {
        if !node_ids.insert(n.id.as_str()) {
            diag(&mut out, format!("node '{}'", n.id), Rule::DuplicateId, "duplicate node id");
        }
    }
    let mut link_by_id: HashMap<&str, &LinkSpec> = HashMap::new();
    for l in &spec.links {
        if link_by_id.insert(l.id.as_str(), l).is_some() {
            diag(&mut out, format!("link '{}'", l.id), Rule::DuplicateId, "duplicate link id");
        }
    }
    let mut movement_keys: HashMap<String, &MovementSpec> = HashMap::new();
    for m in &spec.movements {
        let key = m.key();
        if movement_keys.insert(key.clone(), m).is_some() {
            diag(&mut out, format!("movement '{key}'"), Rule::DuplicateId, "duplicate movement id");
        }
    }

    for l in &spec.links {
        let e = || format!("link '{}'", l.id);
        for (end, node) in [("from", &l.from_node), ("to", &l.to_node)] {
            if !node_ids.contains(node.as_str()) {
                diag(&mut out, e(), Rule::DanglingReference, format!("{end} node '{node}' does not exist"));
            }
        }
        if !(l.length > 0.0) {
            diag(&mut out, e(), Rule::NonPositive, "length must be > 0");
        }
        if l.lanes < 1 {
            diag(&mut out, e(), Rule::NonPositive, "lanes must be >= 1");
        }
        if !(l.free_flow_speed > 0.0) || !(l.jam_density > 0.0) || !(l.capacity > 0.0) {
            diag(&mut out, e(), Rule::NonPositive, "vf, kj and q must be > 0");
        }
        if !(l.wave_speed > 0.0 && l.wave_speed <= l.free_flow_speed) {
            diag(&mut out, e(), Rule::WaveSpeed, "wave speed must satisfy 0 < w <= vf");
        }
        if l.free_flow_speed > 0.0 && !(l.capacity / l.free_flow_speed < l.jam_density) {
            diag(&mut out, e(), Rule::CriticalDensity, "critical density q/vf must be below jam density");
        }
    }

    let mut beta_sum: HashMap<&str, f64> = HashMap::new();
    let mut has_outgoing: HashSet<&str> = HashSet::new();
    for m in &spec.movements {
        let e = || format!("movement '{}'", m.key());
        let from = link_by_id.get(m.from_link.as_str());
        let to = link_by_id.get(m.to_link.as_str());
        if from.is_none() {
            diag(&mut out, e(), Rule::DanglingReference, format!("from_link '{}' does not exist", m.from_link));
        }
        if to.is_none() {
            diag(&mut out, e(), Rule::DanglingReference, format!("to_link '{}' does not exist", m.to_link));
        }
        if !node_ids.contains(m.node.as_str()) {
            diag(&mut out, e(), Rule::DanglingReference, format!("node '{}' does not exist", m.node));
        }
        if let (Some(f), Some(t)) = (from, to) {
            if f.to_node != m.node || t.from_node != m.node {
                diag(&mut out, e(), Rule::MovementTopology, "from_link must end and to_link must start at the movement's node");
            }
        }
        if !(m.turn_ratio > 0.0 && m.turn_ratio <= 1.0) {
            diag(&mut out, e(), Rule::TurnRatioRange, "turn ratio must be in (0, 1]");
        }
        if !(m.saturation_rate > 0.0) {
            diag(&mut out, e(), Rule::NonPositive, "saturation rate must be > 0");
        }
        *beta_sum.entry(m.from_link.as_str()).or_default() += m.turn_ratio;
        has_outgoing.insert(m.from_link.as_str());
    }
    for l in &spec.links {
        if let Some(sum) = beta_sum.get(l.id.as_str()) {
            if (sum - 1.0).abs() > BETA_TOLERANCE {
                diag(&mut out, format!("link '{}'", l.id), Rule::TurnRatioSum, format!("turn ratios sum ≠ 1 ({sum})"));
            }
        }
        let outgoing = has_outgoing.contains(l.id.as_str());
        if l.is_sink && outgoing {
            diag(&mut out, format!("link '{}'", l.id), Rule::SinkWithMovements, "sink link must not have outgoing movements");
        }
        if !l.is_sink && !outgoing {
            diag(&mut out, format!("link '{}'", l.id), Rule::DeadEnd, "link has no outgoing movements and is not a sink");
        }
    }

    for n in &spec.nodes {
        let e = || format!("node '{}'", n.id);
        let at_node: Vec<&MovementSpec> = spec.movements.iter().filter(|m| m.node == n.id).collect();
        if n.signalized {
            if n.phases.len() < 2 {
                diag(&mut out, e(), Rule::PhaseCount, "signalized node needs ≥ 2 phases");
            }
            if n.phases.len() > MAX_PHASES {
                diag(&mut out, e(), Rule::TooManyPhases, format!("at most {MAX_PHASES} phases supported"));
            }
            if n.yellow_time < 0.0 || n.all_red < 0.0 {
                diag(&mut out, e(), Rule::NonPositive, "yellow and all-red times must be >= 0");
            }
            let mut phased = HashSet::new();
            for (p, phase) in n.phases.iter().enumerate() {
                if phase.movements.is_empty() {
                    diag(&mut out, e(), Rule::EmptyPhase, format!("phase {p} grants no movements"));
                }
                for key in &phase.movements {
                    match movement_keys.get(key) {
                        None => diag(&mut out, e(), Rule::DanglingReference, format!("phase {p} references unknown movement '{key}'")),
                        Some(m) if m.node != n.id => {
                            diag(&mut out, e(), Rule::PhaseOwnership, format!("phase {p} movement '{key}' belongs to node '{}'", m.node))
                        }
                        Some(_) => {
                            phased.insert(key.as_str());
                        }
                    }
                }
            }
            for m in &at_node {
                let key = m.key();
                if !phased.contains(key.as_str()) {
                    diag(&mut out, e(), Rule::UnphasedMovement, format!("movement '{key}' is in no phase"));
                }
            }
        } else if !n.phases.is_empty() {
            diag(&mut out, e(), Rule::UnsignalizedPhases, "unsignalized node must not define phases");
        }
    }

    if !spec.links.iter().any(|l| l.is_origin) {
        diag(&mut out, "network".into(), Rule::NoOrigin, "network needs at least one origin link");
    }
    if !spec.links.iter().any(|l| l.is_sink) {
        diag(&mut out, "network".into(), Rule::NoSink, "network needs at least one sink link");
    }
    out
}

/// Per-node data of a compiled network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledNode {
    pub id: String,
    pub position: [f64; 2],
    pub signalized: bool,
    pub n_phases: usize,
    pub yellow_time: f64,
    pub all_red: f64,
    /// Movement indices crossing this node, in input order.
    pub movements: Vec<u32>,
    /// Phase p -> movement indices granted green.
    pub phase_movements: Vec<Vec<u32>>,
    pub incoming_links: Vec<u32>,
    pub outgoing_links: Vec<u32>,
}

/// Per-link data of a compiled network.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledLink {
    pub id: String,
    pub from_node: u32,
    pub to_node: u32,
    pub first_cell: u32,
    pub n_cells: u32,
    pub lanes: u32,
    /// Analytic length as authored; the simulated length is `n_cells * cell_length`.
    pub length: f64,
    pub cell_length: f64,
    pub free_flow_speed: f64,
    pub wave_speed: f64,
    pub jam_density: f64,
    pub capacity: f64,
    pub is_origin: bool,
    pub is_sink: bool,
    pub geometry: Vec<[f64; 2]>,
}

impl CompiledLink {
    pub fn last_cell(&self) -> u32 {
        self.first_cell + self.n_cells - 1
    }

    pub fn cells(&self) -> std::ops::Range<usize> {
        self.first_cell as usize..(self.first_cell + self.n_cells) as usize
    }

    pub fn critical_density(&self) -> f64 {
        self.capacity / self.free_flow_speed
    }
}

/// Flat, immutable array form of a network.
///
/// Cells are numbered link by link in input order, upstream to downstream, so
/// the intra-link successor of cell `i` is always `i + 1` when it exists.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledNetwork {
    pub dt: f64,
    pub name: String,

    // per cell
    pub cell_link: Vec<u32>,
    pub cell_lanes: Vec<f64>,
    pub cell_length: Vec<f64>,
    pub cell_vf: Vec<f64>,
    pub cell_w: Vec<f64>,
    pub cell_kj: Vec<f64>,
    pub cell_q: Vec<f64>,
    pub cell_next: Vec<u32>,
    /// Q·ℓ·Δt: the most vehicles a cell can send or receive in one step.
    /// Equal to the vehicle count at critical density.
    pub cell_cap_step: Vec<f64>,
    /// k_j·Δx·ℓ: vehicles in a jammed cell.
    pub cell_jam_veh: Vec<f64>,
    /// w / v_f.
    pub cell_wave_ratio: Vec<f64>,

    // per movement
    pub mv_up_cell: Vec<u32>,
    pub mv_down_cell: Vec<u32>,
    pub mv_beta: Vec<f64>,
    pub mv_sat: Vec<f64>,
    pub mv_node: Vec<u32>,
    pub mv_phase_mask: Vec<u64>,
    pub mv_from_link: Vec<u32>,
    pub mv_to_link: Vec<u32>,
    pub mv_id: Vec<String>,

    pub links: Vec<CompiledLink>,
    pub nodes: Vec<CompiledNode>,
    pub origin_links: Vec<u32>,
    pub sink_links: Vec<u32>,
    /// Node indices of signalized nodes; position in this list is the signal slot.
    pub signalized_nodes: Vec<u32>,
    /// Per movement: signal slot of its node, or `NONE` when unsignalized.
    pub mv_signal_slot: Vec<u32>,
    /// Cells of links entering signalized nodes (queue accounting).
    pub queue_cells: Vec<u32>,
    /// Per queue cell: signal slot of the node the link enters.
    pub queue_cell_slot: Vec<u32>,

    link_index: HashMap<String, u32>,
    node_index: HashMap<String, u32>,
}

impl CompiledNetwork {
    pub fn n_cells(&self) -> usize {
        self.cell_link.len()
    }

    pub fn n_movements(&self) -> usize {
        self.mv_up_cell.len()
    }

    pub fn n_signals(&self) -> usize {
        self.signalized_nodes.len()
    }

    pub fn link_index(&self, id: &str) -> Option<u32> {
        self.link_index.get(id).copied()
    }

    pub fn node_index(&self, id: &str) -> Option<u32> {
        self.node_index.get(id).copied()
    }

    /// The node behind signal slot `slot`.
    pub fn signal_node(&self, slot: usize) -> &CompiledNode {
        &self.nodes[self.signalized_nodes[slot] as usize]
    }

    /// Vehicles-per-cell → density (veh/m/lane).
    pub fn density_of(&self, cell: usize, vehicles: f64) -> f64 {
        vehicles / (self.cell_length[cell] * self.cell_lanes[cell])
    }
}

/// Compiles a valid spec into flat arrays. Deterministic for identical input.
pub fn compile(spec: &NetworkSpec) -> Result<CompiledNetwork, NetworkError> {
    let diagnostics = validate(spec);
    if !diagnostics.is_empty() {
        return Err(NetworkError::Invalid(diagnostics));
    }
    let dt = spec.dt;

    let node_index: HashMap<String, u32> =
        spec.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i as u32)).collect();
    let link_index: HashMap<String, u32> =
        spec.links.iter().enumerate().map(|(i, l)| (l.id.clone(), i as u32)).collect();

    let mut net = CompiledNetwork {
        dt,
        name: spec.metadata.get("name").and_then(Value::as_str).unwrap_or("").to_string(),
        cell_link: Vec::new(),
        cell_lanes: Vec::new(),
        cell_length: Vec::new(),
        cell_vf: Vec::new(),
        cell_w: Vec::new(),
        cell_kj: Vec::new(),
        cell_q: Vec::new(),
        cell_next: Vec::new(),
        cell_cap_step: Vec::new(),
        cell_jam_veh: Vec::new(),
        cell_wave_ratio: Vec::new(),
        mv_up_cell: Vec::new(),
        mv_down_cell: Vec::new(),
        mv_beta: Vec::new(),
        mv_sat: Vec::new(),
        mv_node: Vec::new(),
        mv_phase_mask: Vec::new(),
        mv_from_link: Vec::new(),
        mv_to_link: Vec::new(),
        mv_id: Vec::new(),
        links: Vec::with_capacity(spec.links.len()),
        nodes: Vec::with_capacity(spec.nodes.len()),
        origin_links: Vec::new(),
        sink_links: Vec::new(),
        signalized_nodes: Vec::new(),
        mv_signal_slot: Vec::new(),
        queue_cells: Vec::new(),
        queue_cell_slot: Vec::new(),
        link_index,
        node_index,
    };

    for n in &spec.nodes {
        net.nodes.push(CompiledNode {
            id: n.id.clone(),
            position: [n.x, n.y],
            signalized: n.signalized,
            n_phases: n.phases.len(),
            yellow_time: n.yellow_time,
            all_red: n.all_red,
            movements: Vec::new(),
            phase_movements: vec![Vec::new(); n.phases.len()],
            incoming_links: Vec::new(),
            outgoing_links: Vec::new(),
        });
    }

    for (li, l) in spec.links.iter().enumerate() {
        let cell_length = l.free_flow_speed * dt;
        let n_cells = ((l.length / cell_length).round() as u32).max(1);
        let first_cell = net.cell_link.len() as u32;
        let lanes = l.lanes as f64;
        for c in 0..n_cells {
            net.cell_link.push(li as u32);
            net.cell_lanes.push(lanes);
            net.cell_length.push(cell_length);
            net.cell_vf.push(l.free_flow_speed);
            net.cell_w.push(l.wave_speed);
            net.cell_kj.push(l.jam_density);
            net.cell_q.push(l.capacity);
            net.cell_next.push(if c + 1 < n_cells { first_cell + c + 1 } else { NONE });
            net.cell_cap_step.push(l.capacity * lanes * dt);
            net.cell_jam_veh.push(l.jam_density * cell_length * lanes);
            net.cell_wave_ratio.push(l.wave_speed / l.free_flow_speed);
        }
        let from = net.node_index[&l.from_node];
        let to = net.node_index[&l.to_node];
        net.nodes[to as usize].incoming_links.push(li as u32);
        net.nodes[from as usize].outgoing_links.push(li as u32);
        let geometry = match &l.geometry {
            Some(g) if g.len() >= 2 => g.clone(),
            _ => vec![
                [spec.nodes[from as usize].x, spec.nodes[from as usize].y],
                [spec.nodes[to as usize].x, spec.nodes[to as usize].y],
            ],
        };
        net.links.push(CompiledLink {
            id: l.id.clone(),
            from_node: from,
            to_node: to,
            first_cell,
            n_cells,
            lanes: l.lanes,
            length: l.length,
            cell_length,
            free_flow_speed: l.free_flow_speed,
            wave_speed: l.wave_speed,
            jam_density: l.jam_density,
            capacity: l.capacity,
            is_origin: l.is_origin,
            is_sink: l.is_sink,
            geometry,
        });
        if l.is_origin {
            net.origin_links.push(li as u32);
        }
        if l.is_sink {
            net.sink_links.push(li as u32);
        }
    }

    let mut slot_of_node = vec![NONE; spec.nodes.len()];
    for (i, n) in spec.nodes.iter().enumerate() {
        if n.signalized {
            slot_of_node[i] = net.signalized_nodes.len() as u32;
            net.signalized_nodes.push(i as u32);
        }
    }

    let mut mv_by_key: HashMap<String, u32> = HashMap::new();
    for (mi, m) in spec.movements.iter().enumerate() {
        let from = net.link_index[&m.from_link];
        let to = net.link_index[&m.to_link];
        let node = net.node_index[&m.node];
        net.mv_up_cell.push(net.links[from as usize].last_cell());
        net.mv_down_cell.push(net.links[to as usize].first_cell);
        net.mv_beta.push(m.turn_ratio);
        net.mv_sat.push(m.saturation_rate);
        net.mv_node.push(node);
        net.mv_phase_mask.push(0);
        net.mv_from_link.push(from);
        net.mv_to_link.push(to);
        net.mv_id.push(m.key());
        net.mv_signal_slot.push(slot_of_node[node as usize]);
        net.nodes[node as usize].movements.push(mi as u32);
        mv_by_key.insert(m.key(), mi as u32);
    }

    for (ni, n) in spec.nodes.iter().enumerate() {
        for (p, phase) in n.phases.iter().enumerate() {
            for key in &phase.movements {
                let mi = mv_by_key[key];
                net.mv_phase_mask[mi as usize] |= 1u64 << p;
                net.nodes[ni].phase_movements[p].push(mi);
            }
        }
    }

    for (slot, &ni) in net.signalized_nodes.iter().enumerate() {
        for &li in &net.nodes[ni as usize].incoming_links {
            for c in net.links[li as usize].cells() {
                net.queue_cells.push(c as u32);
                net.queue_cell_slot.push(slot as u32);
            }
        }
    }

    Ok(net)
}

/// Parses a network JSON document.
pub fn load_network_json(bytes: &[u8]) -> Result<NetworkSpec, NetworkError> {
    // Syntax first so that malformed documents report line/column.
    let value: Value = serde_json::from_slice(bytes).map_err(|e| NetworkError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let spec: NetworkSpec = serde_path_to_error::deserialize(value).map_err(|e| NetworkError::Schema {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    let dangling: Vec<Diagnostic> = validate(&spec)
        .into_iter()
        .filter(|d| d.rule == Rule::DanglingReference)
        .collect();
    if !dangling.is_empty() {
        return Err(NetworkError::Invalid(dangling));
    }
    Ok(spec)
}

/// Serializes a spec as pretty-printed JSON.
pub fn save_network_json(spec: &NetworkSpec) -> Vec<u8> {
    serde_json::to_vec_pretty(spec).expect("network spec is always serializable")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn link(id: &str, from: &str, to: &str, length: f64) -> LinkSpec {
        LinkSpec {
            id: id.into(),
            from_node: from.into(),
            to_node: to.into(),
            length,
            lanes: 1,
            free_flow_speed: 13.89,
            wave_speed: 5.56,
            jam_density: 0.15,
            capacity: 0.5,
            is_origin: false,
            is_sink: false,
            geometry: None,
            extra: BTreeMap::new(),
        }
    }

    fn node(id: &str, signalized: bool) -> NodeSpec {
        NodeSpec {
            id: id.into(),
            x: 0.0,
            y: 0.0,
            signalized,
            phases: Vec::new(),
            yellow_time: 3.0,
            all_red: 2.0,
            extra: BTreeMap::new(),
        }
    }

    fn movement(from: &str, to: &str, node: &str, beta: f64) -> MovementSpec {
        MovementSpec {
            id: None,
            from_link: from.into(),
            to_link: to.into(),
            turn_ratio: beta,
            saturation_rate: 0.5,
            node: node.into(),
            extra: BTreeMap::new(),
        }
    }

    fn phase(ms: &[&str]) -> PhaseSpec {
        PhaseSpec {
            movements: ms.iter().map(|s| s.to_string()).collect(),
            extra: BTreeMap::new(),
        }
    }

    /// Two approaches (a, b) crossing node `c` into one outgoing link each.
    fn crossing() -> NetworkSpec {
        let mut a = link("a", "na", "c", 200.0);
        a.is_origin = true;
        let mut b = link("b", "nb", "c", 200.0);
        b.is_origin = true;
        let mut x = link("x", "c", "nx", 100.0);
        x.is_sink = true;
        let mut y = link("y", "c", "ny", 100.0);
        y.is_sink = true;
        let mut c = node("c", true);
        c.phases = vec![phase(&["a->x", "a->y"]), phase(&["b->y"])];
        NetworkSpec {
            dt: 1.0,
            nodes: vec![node("na", false), node("nb", false), c, node("nx", false), node("ny", false)],
            links: vec![a, b, x, y],
            movements: vec![
                movement("a", "x", "c", 0.5),
                movement("a", "y", "c", 0.5),
                movement("b", "y", "c", 1.0),
            ],
            metadata: Map::new(),
            extra: BTreeMap::new(),
        }
    }

    #[test]
    fn well_formed_spec_has_no_diagnostics() {
        assert!(validate(&crossing()).is_empty());
    }

    #[test]
    fn turn_ratio_sum_is_checked() {
        let mut spec = crossing();
        spec.movements[1].turn_ratio = 0.4;
        let d = validate(&spec);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].rule, Rule::TurnRatioSum);
        assert!(d[0].message.contains("turn ratios sum ≠ 1"));
        assert!(d[0].entity.contains("'a'"));
    }

    #[test]
    fn signalized_node_needs_two_phases() {
        let mut spec = crossing();
        spec.nodes[2].phases = vec![phase(&["a->x", "a->y", "b->y"])];
        let d = validate(&spec);
        assert!(d.iter().any(|d| d.rule == Rule::PhaseCount && d.message.contains("≥ 2 phases")));
    }

    #[test]
    fn unphased_movement_and_dangling_refs() {
        let mut spec = crossing();
        spec.nodes[2].phases[1] = phase(&["zzz"]);
        let rules: Vec<Rule> = validate(&spec).iter().map(|d| d.rule).collect();
        assert!(rules.contains(&Rule::DanglingReference));
        assert!(rules.contains(&Rule::UnphasedMovement));
    }

    #[test]
    fn origin_and_sink_required() {
        let mut spec = crossing();
        for l in &mut spec.links {
            l.is_origin = false;
        }
        assert!(validate(&spec).iter().any(|d| d.rule == Rule::NoOrigin));
    }

    #[test]
    fn wave_speed_bound() {
        let mut spec = crossing();
        spec.links[0].wave_speed = 20.0;
        assert!(validate(&spec).iter().any(|d| d.rule == Rule::WaveSpeed));
    }

    #[test]
    fn compile_cell_counts_follow_rounding() {
        let net = compile(&crossing()).unwrap();
        // round(200 / 13.89) = 14, round(100 / 13.89) = 7
        assert_eq!(net.links[0].n_cells, 14);
        assert_eq!(net.links[2].n_cells, 7);
        assert_eq!(net.n_cells(), 14 + 14 + 7 + 7);
        for c in 0..net.n_cells() {
            assert_eq!(net.cell_length[c], net.cell_vf[c] * net.dt);
        }
    }

    #[test]
    fn short_link_gets_one_cell() {
        let mut spec = crossing();
        spec.links[2].length = 10.0;
        let net = compile(&spec).unwrap();
        assert_eq!(net.links[2].n_cells, 1);
        assert_eq!(net.cell_next[net.links[2].first_cell as usize], NONE);
    }

    #[test]
    fn movement_cells_and_phase_masks() {
        let net = compile(&crossing()).unwrap();
        assert_eq!(net.mv_up_cell[0], net.links[0].last_cell());
        assert_eq!(net.mv_down_cell[0], net.links[2].first_cell);
        assert_eq!(net.mv_phase_mask, vec![0b01, 0b01, 0b10]);
        assert_eq!(net.signalized_nodes, vec![2]);
        assert_eq!(net.queue_cells.len(), 28);
    }

    #[test]
    fn compile_rejects_invalid() {
        let mut spec = crossing();
        spec.links[0].length = -1.0;
        assert!(matches!(compile(&spec), Err(NetworkError::Invalid(_))));
    }

    #[test]
    fn json_minimal_document() {
        let doc = br#"{
            "dt": 1,
            "nodes": [{"id": "o", "x": 0, "y": 0}, {"id": "m", "x": 10, "y": 0}, {"id": "d", "x": 20, "y": 0}],
            "links": [
                {"id": "l1", "from": "o", "to": "m", "length": 100, "lanes": 1, "vf": 13.89, "w": 5.56, "kj": 0.15, "q": 0.5, "origin": true},
                {"id": "l2", "from": "m", "to": "d", "length": 100, "lanes": 1, "vf": 13.89, "w": 5.56, "kj": 0.15, "q": 0.5, "sink": true}
            ],
            "movements": [{"from_link": "l1", "to_link": "l2", "beta": 1.0, "sat": 0.5, "node": "m"}],
            "metadata": {"name": "tiny"}
        }"#;
        let spec = load_network_json(doc).unwrap();
        assert_eq!(spec.links.len(), 2);
        assert!(validate(&spec).is_empty());
        assert_eq!(compile(&spec).unwrap().name, "tiny");
    }

    #[test]
    fn json_unknown_fields_survive_round_trip() {
        let doc = br#"{
            "nodes": [{"id": "o", "x": 0, "y": 0, "osm_id": 42}, {"id": "d", "x": 1, "y": 0}],
            "links": [{"id": "l", "from": "o", "to": "d", "length": 50, "vf": 13.89, "w": 5.56, "kj": 0.15, "q": 0.5,
                       "origin": true, "sink": true, "highway": "primary"}],
            "movements": [],
            "metadata": {"source": "test"},
            "schema_version": 3
        }"#;
        let spec = load_network_json(doc).unwrap();
        assert_eq!(spec.extra["schema_version"], 3);
        assert_eq!(spec.links[0].extra["highway"], "primary");
        let again = load_network_json(&save_network_json(&spec)).unwrap();
        assert_eq!(spec, again);
    }

    #[test]
    fn json_errors_carry_context() {
        match load_network_json(b"{\n  \"nodes\": [,]\n}") {
            Err(NetworkError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let doc = br#"{"nodes": [], "links": [{"id": "l", "from": "a", "to": "b", "length": "long"}], "movements": []}"#;
        match load_network_json(doc) {
            Err(NetworkError::Schema { path, .. }) => assert!(path.starts_with("links[0]"), "{path}"),
            other => panic!("expected schema error, got {other:?}"),
        }
        let doc = br#"{"nodes": [{"id": "a", "x": 0, "y": 0}],
            "links": [{"id": "l", "from": "a", "to": "ghost", "length": 10, "vf": 13.89, "w": 5.56, "kj": 0.15, "q": 0.5, "origin": true, "sink": true}],
            "movements": []}"#;
        assert!(matches!(load_network_json(doc), Err(NetworkError::Invalid(d)) if d[0].message.contains("ghost")));
    }
}
