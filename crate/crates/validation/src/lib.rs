//! Reference setups and measurements shared by the acceptance checks in
//! `tests/acceptance.rs`.

use std::io::Write;
use std::sync::Arc;

use cellflow_core::network::{compile, load_network_json};
use cellflow_core::scenarios::{CAPACITY, FREE_FLOW_SPEED, JAM_DENSITY};
use cellflow_core::{Engine, EngineConfig};

/// A straight single-lane road of `cells` cells ending in a sink, with
/// wave speed `w` and nothing flowing in.
pub fn corridor(cells: usize, w: f64) -> Engine {
    let len = cells as f64 * FREE_FLOW_SPEED;
    let json = format!(
        r#"{{
        "nodes": [{{"id": "a", "x": 0, "y": 0}}, {{"id": "b", "x": {len}, "y": 0}}],
        "links": [{{"id": "road", "from": "a", "to": "b", "length": {len}, "vf": {FREE_FLOW_SPEED}, "w": {w}, "kj": {JAM_DENSITY}, "q": {CAPACITY}, "origin": true, "sink": true}}],
        "movements": []
    }}"#
    );
    let net = compile(&load_network_json(json.as_bytes()).expect("corridor json")).expect("valid corridor");
    Engine::new(Arc::new(net), vec![0.0], EngineConfig::default()).expect("valid engine")
}

/// Fills every cell of `engine` to jam.
pub fn jam(engine: &mut Engine) {
    for c in 0..engine.network().n_cells() {
        let j = engine.network().cell_jam_veh[c];
        engine.seed_vehicles(c, j);
    }
}

/// Count halfway between jam and the congested state a jam discharges into
/// (flow at capacity, or the whole wave-limited flow when that is lower).
pub fn front_level(engine: &Engine) -> f64 {
    let net = engine.network();
    let (jam, cap, r) = (net.cell_jam_veh[0], net.cell_cap_step[0], net.cell_wave_ratio[0]);
    let discharge = jam - cap.min(r * jam) / r;
    0.5 * (jam + discharge)
}

/// Interpolated cell position of the furthest-downstream crossing of `level`
/// going from jammed (upstream) to discharging (downstream).
pub fn jam_front(engine: &Engine, level: f64) -> Option<f64> {
    let v = &engine.state().vehicles;
    (0..v.len().saturating_sub(1))
        .rev()
        .find(|&i| v[i] >= level && v[i + 1] < level)
        .map(|i| i as f64 + (v[i] - level) / (v[i] - v[i + 1]))
}

/// Prints `PASS name: detail` or `FAIL name: detail` straight to stdout
/// (bypassing test output capture), then asserts.
pub fn verdict(name: &str, ok: bool, detail: &str) {
    let line = format!("\n{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).expect("stdout");
    out.flush().expect("stdout");
    assert!(ok, "{name}: {detail}");
}

pub fn within(x: f64, target: f64, rel: f64) -> bool {
    (x - target).abs() <= rel * target.abs()
}
