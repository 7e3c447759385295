#![allow(dead_code)]

use std::sync::Arc;

use cellflow_core::network::{compile, load_network_json, CompiledNetwork};
use cellflow_core::{Engine, EngineConfig};

pub const VF: f64 = 13.89;
pub const W: f64 = 5.56;
pub const KJ: f64 = 0.15;
pub const Q: f64 = 0.5;

pub fn network(json: &str) -> Arc<CompiledNetwork> {
    Arc::new(compile(&load_network_json(json.as_bytes()).unwrap()).unwrap())
}

/// A straight road of `cells` cells ending in a sink, wave speed `w`.
pub fn corridor(cells: usize, w: f64) -> Engine {
    let json = format!(
        r#"{{
        "nodes": [{{"id": "a", "x": 0, "y": 0}}, {{"id": "b", "x": {len}, "y": 0}}],
        "links": [{{"id": "road", "from": "a", "to": "b", "length": {len}, "vf": {VF}, "w": {w}, "kj": {KJ}, "q": {Q}, "origin": true, "sink": true}}],
        "movements": []
    }}"#,
        len = cells as f64 * VF
    );
    Engine::new(network(&json), vec![0.0], EngineConfig::default()).unwrap()
}

/// Two one-cell links merging into one exit link at an unsignalized node.
pub fn merge(sat_a: f64, sat_b: f64) -> Engine {
    let link = |id: &str, from: &str, to: &str, origin: bool, sink: bool| {
        format!(r#"{{"id": "{id}", "from": "{from}", "to": "{to}", "length": {VF}, "vf": {VF}, "w": {W}, "kj": {KJ}, "q": {Q}, "origin": {origin}, "sink": {sink}}}"#)
    };
    let json = format!(
        r#"{{
        "nodes": [{{"id": "a", "x": -1, "y": 1}}, {{"id": "b", "x": -1, "y": -1}}, {{"id": "m", "x": 0, "y": 0}}, {{"id": "z", "x": 1, "y": 0}}],
        "links": [{}, {}, {}],
        "movements": [
            {{"from_link": "A", "to_link": "Z", "beta": 1, "sat": {sat_a}, "node": "m"}},
            {{"from_link": "B", "to_link": "Z", "beta": 1, "sat": {sat_b}, "node": "m"}}
        ]
    }}"#,
        link("A", "a", "m", true, false),
        link("B", "b", "m", true, false),
        link("Z", "m", "z", false, true)
    );
    Engine::new(network(&json), vec![0.0, 0.0], EngineConfig::default()).unwrap()
}
