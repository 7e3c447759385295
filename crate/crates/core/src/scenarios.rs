//! Built-in networks and the name-addressable scenario registry.
//!
//! Link lengths are multiples of the free-flow cell length so that every
//! generated link compiles to a whole number of cells. Cell totals for the
//! built-in families are:
//!
//! | family | cells |
//! |---|---|
//! | single intersection | 24 |
//! | grid R×C | 12·R·C + 27·(R + C) − 30 |
//! | arterial N | 16·N + 8 |

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde_json::{Map, Value};

use crate::engine::{Engine, EngineConfig};
use crate::error::{EngineError, ScenarioError};
use crate::network::{compile, load_network_json, CompiledNetwork, LinkSpec, MovementSpec, NetworkSpec, NodeSpec, PhaseSpec};

pub const FREE_FLOW_SPEED: f64 = 13.89;
pub const WAVE_SPEED: f64 = 5.56;
pub const JAM_DENSITY: f64 = 0.15;
pub const CAPACITY: f64 = 0.5;
pub const DT: f64 = 1.0;
/// Length of one cell at the default parameters.
pub const CELL: f64 = FREE_FLOW_SPEED * DT;

/// Default arrival rate per boundary access point, veh/hr.
pub const ACCESS_RATE_VPH: f64 = 1080.0;
pub const DEFAULT_HORIZON: usize = 720;
pub const DEFAULT_DECISION_INTERVAL: usize = 5;

pub const SINGLE_LANES: u32 = 3;
pub const SINGLE_APPROACH_CELLS: u32 = 3;
pub const SINGLE_NS_RATE: f64 = 0.3;
pub const SINGLE_EW_RATE: f64 = 0.2;

pub const GRID_LINK_CELLS: u32 = 3;
pub const GRID_BOUNDARY_CELLS: u32 = 3;

pub const ARTERIAL_SPACING: f64 = 400.0;
pub const ARTERIAL_MAIN_CELLS: u32 = 4;
pub const ARTERIAL_SIDE_CELLS: u32 = 2;
pub const ARTERIAL_MAIN_LANES: u32 = 2;
pub const ARTERIAL_SIDE_LANES: u32 = 1;

/// Turn split for an approach: through, right, left.
pub const TURNS: [f64; 3] = [0.8, 0.1, 0.1];

/// Movement saturation rate per approach lane for through, right and left
/// movements, veh/s. Turning rates never bind below the cell capacity.
pub const MOVEMENT_SAT: [f64; 3] = [0.28, 1.0, 1.0];

/// Tunable layout of the generated grids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridParams {
    pub internal_lanes: u32,
    pub boundary_lanes: u32,
    pub turns: [f64; 3],
    /// Movement saturation rate per approach lane (through, right, left), veh/s.
    pub sat_per_lane: [f64; 3],
}

impl Default for GridParams {
    fn default() -> Self {
        Self { internal_lanes: 1, boundary_lanes: 1, turns: TURNS, sat_per_lane: MOVEMENT_SAT }
    }
}

pub const GRID_SIZES: [usize; 4] = [2, 4, 6, 8];
pub const ARTERIAL_SIZES: [usize; 4] = [3, 5, 10, 20];

/// A network plus its demand and control defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioDefinition {
    pub name: String,
    pub network: NetworkSpec,
    /// Arrival rate (veh/s) per origin link id.
    pub demand: BTreeMap<String, f64>,
    pub horizon: usize,
    /// Simulation steps between decisions.
    pub decision_interval: usize,
    /// Ordered signalized node ids along which green-wave offsets accumulate.
    pub corridors: Vec<Vec<String>>,
}

impl ScenarioDefinition {
    pub fn compile(&self) -> Result<Arc<CompiledNetwork>, ScenarioError> {
        Ok(Arc::new(compile(&self.network)?))
    }

    /// Arrival rates aligned with `net.origin_links`; origins without demand get 0.
    pub fn rates_for(&self, net: &CompiledNetwork) -> Result<Vec<f64>, ScenarioError> {
        for key in self.demand.keys() {
            match net.link_index(key) {
                Some(li) if net.links[li as usize].is_origin => {}
                _ => return Err(EngineError::NotAnOrigin(key.clone()).into()),
            }
        }
        Ok(net
            .origin_links
            .iter()
            .map(|&li| self.demand.get(&net.links[li as usize].id).copied().unwrap_or(0.0))
            .collect())
    }

    pub fn engine(&self, config: EngineConfig) -> Result<Engine, ScenarioError> {
        let net = self.compile()?;
        let rates = self.rates_for(&net)?;
        Ok(Engine::new(net, rates, config)?)
    }

    /// Multiplies every arrival rate by `factor` (demand sensitivity runs).
    pub fn scaled(mut self, factor: f64) -> Self {
        self.demand.values_mut().for_each(|r| *r *= factor);
        self
    }

    pub fn total_demand(&self) -> f64 {
        self.demand.values().sum()
    }
}

/// Every origin link gets `rate_vph / 3600` veh/s.
pub fn generate_demand(network: &NetworkSpec, rate_vph: f64) -> BTreeMap<String, f64> {
    network
        .links
        .iter()
        .filter(|l| l.is_origin)
        .map(|l| (l.id.clone(), rate_vph / 3600.0))
        .collect()
}

/// Incrementally assembles a network spec.
struct Builder {
    spec: NetworkSpec,
}

/// Compass sides, clockwise.
const SIDES: [&str; 4] = ["N", "E", "S", "W"];
const SIDE_VEC: [[f64; 2]; 4] = [[0.0, 1.0], [1.0, 0.0], [0.0, -1.0], [-1.0, 0.0]];

impl Builder {
    fn new(name: &str) -> Self {
        let mut metadata = Map::new();
        metadata.insert("name".into(), Value::String(name.into()));
        metadata.insert("source".into(), Value::String("generated".into()));
        Self {
            spec: NetworkSpec {
                dt: DT,
                nodes: Vec::new(),
                links: Vec::new(),
                movements: Vec::new(),
                metadata,
                extra: BTreeMap::new(),
            },
        }
    }

    fn node(&mut self, id: &str, pos: [f64; 2], signalized: bool) {
        self.spec.nodes.push(NodeSpec {
            id: id.into(),
            x: pos[0],
            y: pos[1],
            signalized,
            phases: Vec::new(),
            yellow_time: 3.0,
            all_red: 2.0,
            extra: BTreeMap::new(),
        });
    }

    fn pos(&self, id: &str) -> [f64; 2] {
        let n = self.spec.nodes.iter().find(|n| n.id == id).expect("node exists");
        [n.x, n.y]
    }

    /// Adds a link of exactly `cells` cells, drawn offset to the right of its centreline.
    #[allow(clippy::too_many_arguments)]
    fn link(&mut self, id: &str, from: &str, to: &str, cells: u32, lanes: u32, origin: bool, sink: bool) {
        let a = self.pos(from);
        let b = self.pos(to);
        let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
        let len = (dx * dx + dy * dy).sqrt().max(1e-9);
        let off = 2.0 + lanes as f64;
        let (ox, oy) = (dy / len * off, -dx / len * off);
        self.spec.links.push(LinkSpec {
            id: id.into(),
            from_node: from.into(),
            to_node: to.into(),
            length: cells as f64 * CELL,
            lanes,
            free_flow_speed: FREE_FLOW_SPEED,
            wave_speed: WAVE_SPEED,
            jam_density: JAM_DENSITY,
            capacity: CAPACITY,
            is_origin: origin,
            is_sink: sink,
            geometry: Some(vec![[a[0] + ox, a[1] + oy], [b[0] + ox, b[1] + oy]]),
            extra: BTreeMap::new(),
        });
    }

    fn lanes_of(&self, link: &str) -> u32 {
        self.spec.links.iter().find(|l| l.id == link).expect("link exists").lanes
    }

    /// Through/right/left movements at a 4-way node, plus an NS and an EW phase.
    ///
    /// `incoming[s]` / `outgoing[s]` are the link ids on side `s`, if any.
    fn four_way(&mut self, node: &str, incoming: [Option<String>; 4], outgoing: [Option<String>; 4], turns: [f64; 3], sat_per_lane: [f64; 3]) {
        let mut phases = [Vec::new(), Vec::new()];
        for (s, inc) in incoming.iter().enumerate() {
            let Some(from) = inc else { continue };
            // Entering from side s: through exits opposite, right one side clockwise further, left the other.
            let targets = [(s + 2) % 4, (s + 3) % 4, (s + 1) % 4];
            let avail: Vec<(usize, f64, f64)> = (0..3)
                .filter(|&i| outgoing[targets[i]].is_some())
                .map(|i| (targets[i], turns[i], sat_per_lane[i]))
                .collect();
            let total: f64 = avail.iter().map(|(_, b, _)| b).sum();
            for (t, b, per_lane) in avail {
                let to = outgoing[t].clone().unwrap();
                let sat = per_lane * self.lanes_of(from) as f64;
                let id = format!("{from}->{to}");
                self.spec.movements.push(MovementSpec {
                    id: None,
                    from_link: from.clone(),
                    to_link: to,
                    turn_ratio: b / total,
                    saturation_rate: sat,
                    node: node.into(),
                    extra: BTreeMap::new(),
                });
                phases[s % 2].push(id);
            }
        }
        let n = self.spec.nodes.iter_mut().find(|n| n.id == node).expect("node exists");
        n.phases = phases
            .into_iter()
            .map(|movements| PhaseSpec { movements, extra: BTreeMap::new() })
            .collect();
    }
}

fn finish(name: &str, b: Builder, demand: BTreeMap<String, f64>, corridors: Vec<Vec<String>>) -> ScenarioDefinition {
    ScenarioDefinition {
        name: name.into(),
        network: b.spec,
        demand,
        horizon: DEFAULT_HORIZON,
        decision_interval: DEFAULT_DECISION_INTERVAL,
        corridors,
    }
}

/// One signalized four-approach intersection with 8 links of 3 cells.
pub fn gen_single_intersection() -> ScenarioDefinition {
    gen_single_intersection_with(SINGLE_LANES, MOVEMENT_SAT)
}

pub fn gen_single_intersection_with(lanes: u32, sat_per_lane: [f64; 3]) -> ScenarioDefinition {
    let name = "single-intersection-v0";
    let mut b = Builder::new(name);
    let reach = SINGLE_APPROACH_CELLS as f64 * CELL;
    b.node("C", [0.0, 0.0], true);
    let mut incoming: [Option<String>; 4] = Default::default();
    let mut outgoing: [Option<String>; 4] = Default::default();
    let mut demand = BTreeMap::new();
    for (s, side) in SIDES.iter().enumerate() {
        let d = format!("{side}0");
        b.node(&d, [SIDE_VEC[s][0] * reach, SIDE_VEC[s][1] * reach], false);
        let inc = format!("{side}_in");
        let out = format!("{side}_out");
        b.link(&inc, &d, "C", SINGLE_APPROACH_CELLS, lanes, true, false);
        b.link(&out, "C", &d, SINGLE_APPROACH_CELLS, lanes, false, true);
        demand.insert(inc.clone(), if s % 2 == 0 { SINGLE_NS_RATE } else { SINGLE_EW_RATE });
        incoming[s] = Some(inc);
        outgoing[s] = Some(out);
    }
    b.four_way("C", incoming, outgoing, TURNS, sat_per_lane);
    finish(name, b, demand, vec![vec!["C".into()]])
}

/// Bypass cells per access point; the total is fixed by the grid dimensions.
fn bypass_cells(rows: usize, cols: usize) -> Vec<u32> {
    let n_ap = 2 * (rows + cols);
    let total = (21 * (rows + cols)).saturating_sub(30).max(n_ap);
    (0..n_ap).map(|i| (total / n_ap + usize::from(i < total % n_ap)) as u32).collect()
}

/// `rows × cols` signalized grid. Each boundary access point has an entry
/// link, an exit link and a bypass link that ends at the boundary node and
/// drains straight out of the network.
pub fn gen_grid(rows: usize, cols: usize) -> ScenarioDefinition {
    gen_grid_with(rows, cols, &GridParams::default())
}

/// Link ids per compass side, in or out.
type Approaches = [Option<String>; 4];

pub fn gen_grid_with(rows: usize, cols: usize, params: &GridParams) -> ScenarioDefinition {
    assert!(rows >= 1 && cols >= 1, "grid needs at least one row and column");
    let name = format!("grid-{rows}x{cols}-v0");
    let mut b = Builder::new(&name);
    let spacing = GRID_LINK_CELLS as f64 * CELL;
    let reach = GRID_BOUNDARY_CELLS as f64 * CELL;
    let id = |r: usize, c: usize| format!("n{r}_{c}");
    for r in 0..rows {
        for c in 0..cols {
            b.node(&id(r, c), [c as f64 * spacing, -(r as f64) * spacing], true);
        }
    }
    let neighbor = |r: usize, c: usize, s: usize| -> Option<(usize, usize)> {
        match s {
            0 if r > 0 => Some((r - 1, c)),
            1 if c + 1 < cols => Some((r, c + 1)),
            2 if r + 1 < rows => Some((r + 1, c)),
            3 if c > 0 => Some((r, c - 1)),
            _ => None,
        }
    };

    let bypass = bypass_cells(rows, cols);
    let mut ap = 0;
    let mut demand = BTreeMap::new();
    let mut sides: Vec<(Approaches, Approaches)> = vec![Default::default(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let here = id(r, c);
            for s in 0..4 {
                match neighbor(r, c, s) {
                    Some((nr, nc)) => {
                        let there = id(nr, nc);
                        let lid = format!("{here}-{there}");
                        b.link(&lid, &here, &there, GRID_LINK_CELLS, params.internal_lanes, false, false);
                        sides[r * cols + c].1[s] = Some(lid.clone());
                        sides[nr * cols + nc].0[(s + 2) % 4] = Some(lid);
                    }
                    None => {
                        let p = b.pos(&here);
                        let v = SIDE_VEC[s];
                        let d = format!("{here}{}", SIDES[s]);
                        let dp = format!("{d}b");
                        b.node(&d, [p[0] + v[0] * reach, p[1] + v[1] * reach], false);
                        // The bypass approaches diagonally so it renders apart from the entry link.
                        let skew = 0.35 * reach;
                        b.node(&dp, [p[0] + v[0] * reach - v[1] * skew, p[1] + v[1] * reach + v[0] * skew], false);
                        let entry = format!("{d}_in");
                        let exit = format!("{d}_out");
                        let by = format!("{d}_bypass");
                        b.link(&entry, &d, &here, GRID_BOUNDARY_CELLS, params.boundary_lanes, true, false);
                        b.link(&exit, &here, &d, GRID_BOUNDARY_CELLS, params.boundary_lanes, false, true);
                        b.link(&by, &dp, &here, bypass[ap], params.boundary_lanes, true, true);
                        ap += 1;
                        for o in [&entry, &by] {
                            demand.insert(o.clone(), ACCESS_RATE_VPH / 3600.0);
                        }
                        sides[r * cols + c].0[s] = Some(entry);
                        sides[r * cols + c].1[s] = Some(exit);
                    }
                }
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let (inc, out) = sides[r * cols + c].clone();
            b.four_way(&id(r, c), inc, out, params.turns, params.sat_per_lane);
        }
    }
    let corridors = (0..rows).map(|r| (0..cols).map(|c| id(r, c)).collect()).collect();
    finish(&name, b, demand, corridors)
}

/// `n` signalized intersections along an east–west corridor 400 m apart,
/// each with a north and a south side street.
pub fn gen_arterial(n: usize) -> ScenarioDefinition {
    assert!(n >= 2, "arterial needs at least two intersections");
    let name = format!("arterial-{n}-v0");
    let mut b = Builder::new(&name);
    let id = |i: usize| format!("a{i}");
    let side_reach = ARTERIAL_SIDE_CELLS as f64 * CELL;
    let end_reach = ARTERIAL_MAIN_CELLS as f64 * CELL;
    for i in 0..n {
        b.node(&id(i), [i as f64 * ARTERIAL_SPACING, 0.0], true);
    }
    b.node("west", [-end_reach, 0.0], false);
    b.node("east", [(n - 1) as f64 * ARTERIAL_SPACING + end_reach, 0.0], false);
    let mut demand = BTreeMap::new();
    let rate = ACCESS_RATE_VPH / 3600.0;
    let mut inc: Vec<[Option<String>; 4]> = vec![Default::default(); n];
    let mut out: Vec<[Option<String>; 4]> = vec![Default::default(); n];

    for i in 0..n {
        let here = id(i);
        if i + 1 < n {
            let there = id(i + 1);
            let east = format!("{here}-{there}");
            let west = format!("{there}-{here}");
            b.link(&east, &here, &there, ARTERIAL_MAIN_CELLS, ARTERIAL_MAIN_LANES, false, false);
            b.link(&west, &there, &here, ARTERIAL_MAIN_CELLS, ARTERIAL_MAIN_LANES, false, false);
            out[i][1] = Some(east.clone());
            inc[i + 1][3] = Some(east);
            out[i + 1][3] = Some(west.clone());
            inc[i][1] = Some(west);
        }
        for (s, dir) in [(0usize, 1.0), (2usize, -1.0)] {
            let d = format!("{here}{}", SIDES[s]);
            b.node(&d, [i as f64 * ARTERIAL_SPACING, dir * side_reach], false);
            let si = format!("{d}_in");
            let so = format!("{d}_out");
            b.link(&si, &d, &here, ARTERIAL_SIDE_CELLS, ARTERIAL_SIDE_LANES, true, false);
            b.link(&so, &here, &d, ARTERIAL_SIDE_CELLS, ARTERIAL_SIDE_LANES, false, true);
            demand.insert(si.clone(), rate);
            inc[i][s] = Some(si);
            out[i][s] = Some(so);
        }
    }
    let last = id(n - 1);
    b.link("west_in", "west", &id(0), ARTERIAL_MAIN_CELLS, ARTERIAL_MAIN_LANES, true, false);
    b.link("west_out", &id(0), "west", ARTERIAL_MAIN_CELLS, ARTERIAL_MAIN_LANES, false, true);
    b.link("east_in", "east", &last, ARTERIAL_MAIN_CELLS, ARTERIAL_MAIN_LANES, true, false);
    b.link("east_out", &last, "east", ARTERIAL_MAIN_CELLS, ARTERIAL_MAIN_LANES, false, true);
    inc[0][3] = Some("west_in".into());
    out[0][3] = Some("west_out".into());
    inc[n - 1][1] = Some("east_in".into());
    out[n - 1][1] = Some("east_out".into());
    demand.insert("west_in".into(), rate);
    demand.insert("east_in".into(), rate);
    for i in 0..n {
        b.four_way(&id(i), inc[i].clone(), out[i].clone(), TURNS, MOVEMENT_SAT);
    }
    finish(&name, b, demand, vec![(0..n).map(id).collect()])
}

/// Wraps a loaded network as a scenario. Demand comes from a `demand`
/// object in the metadata (link id → veh/s) when present, otherwise every
/// origin gets the default access-point rate. A `corridors` metadata array
/// of node-id arrays feeds the green-wave controller.
pub fn scenario_from_network(name: &str, network: NetworkSpec) -> ScenarioDefinition {
    let demand = match network.metadata.get("demand").and_then(Value::as_object) {
        Some(map) => map.iter().filter_map(|(k, v)| v.as_f64().map(|r| (k.clone(), r))).collect(),
        None => generate_demand(&network, ACCESS_RATE_VPH),
    };
    let corridors = network
        .metadata
        .get("corridors")
        .and_then(Value::as_array)
        .map(|cs| {
            cs.iter()
                .filter_map(Value::as_array)
                .map(|c| c.iter().filter_map(|v| v.as_str().map(String::from)).collect())
                .collect()
        })
        .unwrap_or_default();
    ScenarioDefinition {
        name: name.into(),
        network,
        demand,
        horizon: DEFAULT_HORIZON,
        decision_interval: DEFAULT_DECISION_INTERVAL,
        corridors,
    }
}

/// Names of the built-in scenarios, smallest first within each family.
pub fn builtin_names() -> Vec<String> {
    let mut names = vec!["single-intersection-v0".to_string()];
    names.extend(GRID_SIZES.iter().map(|n| format!("grid-{n}x{n}-v0")));
    names.extend(ARTERIAL_SIZES.iter().map(|n| format!("arterial-{n}-v0")));
    names
}

/// Built-in scenarios plus any JSON networks loaded from a directory.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    extra: BTreeMap<String, NetworkSpec>,
}

impl Registry {
    pub fn builtin() -> Self {
        Self::default()
    }

    /// Registers every `*.json` in `dir` under its metadata `name` (or file stem).
    pub fn with_directory(mut self, dir: impl AsRef<Path>) -> Result<Self, ScenarioError> {
        let dir = dir.as_ref();
        let io = |e: std::io::Error| ScenarioError::Io { path: dir.display().to_string(), source: e };
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(io)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let bytes = std::fs::read(&path).map_err(|e| ScenarioError::Io { path: path.display().to_string(), source: e })?;
            let spec = load_network_json(&bytes)?;
            let name = spec
                .metadata
                .get("name")
                .and_then(Value::as_str)
                .map(String::from)
                .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
            self.extra.insert(name, spec);
        }
        Ok(self)
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = builtin_names();
        names.extend(self.extra.keys().cloned());
        names
    }

    pub fn make(&self, name: &str) -> Result<ScenarioDefinition, ScenarioError> {
        if let Some(def) = make_builtin(name) {
            return Ok(def);
        }
        if let Some(spec) = self.extra.get(name) {
            return Ok(scenario_from_network(name, spec.clone()));
        }
        Err(ScenarioError::Unknown { name: name.into(), available: self.names() })
    }
}

fn make_builtin(name: &str) -> Option<ScenarioDefinition> {
    let stem = name.strip_suffix("-v0")?;
    if stem == "single-intersection" {
        return Some(gen_single_intersection());
    }
    if let Some(dims) = stem.strip_prefix("grid-") {
        let (r, c) = dims.split_once('x')?;
        let (r, c) = (r.parse::<usize>().ok()?, c.parse::<usize>().ok()?);
        return ((1..=8).contains(&r) && (1..=8).contains(&c)).then(|| gen_grid(r, c));
    }
    if let Some(n) = stem.strip_prefix("arterial-") {
        let n = n.parse::<usize>().ok()?;
        return (2..=20).contains(&n).then(|| gen_arterial(n));
    }
    None
}

/// Looks a scenario up among the built-ins.
pub fn registry_make(name: &str) -> Result<ScenarioDefinition, ScenarioError> {
    Registry::builtin().make(name)
}
