use std::process::{Command, Output};

use cellflow_core::frame::read_replay;

fn cellflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cellflow")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

#[test]
fn eval_csv_has_frozen_columns_and_sorted_seeds() {
    let o = cellflow(&["eval", "--seconds", "300", "--seeds", "3", "--seed", "5", "--mesoscopic", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "scenario,controller,seed,throughput,delay,queue,wall_s,steps_per_s");
    let seeds: Vec<&str> = lines.map(|l| l.split(',').nth(2).unwrap()).collect();
    assert_eq!(seeds, ["5", "6", "7"]);
}

#[test]
fn eval_is_reproducible() {
    let args = ["eval", "--scenario", "grid-2x2-v0", "--controller", "maxpressure", "--seconds", "300", "--seeds", "2", "--mesoscopic", "--format", "csv"];
    let strip = |o: Output| stdout(&o).lines().map(|l| l.split(',').take(6).collect::<Vec<_>>().join(",")).collect::<Vec<_>>();
    assert_eq!(strip(cellflow(&args)), strip(cellflow(&args)));
}

#[test]
fn eval_json_summarizes() {
    let o = cellflow(&["eval", "--seconds", "120", "--seeds", "2", "--format", "json", "--controller", "ltmp", "--min-green", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
    assert_eq!(v["runs"][0]["controller"], "ltmp");
    assert!(v["throughput"]["mean"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_text_reports_mean_and_spread() {
    let o = cellflow(&["eval", "--seconds", "120", "--seeds", "2", "--mesoscopic", "--lost-time", "1.5"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("single-intersection-v0 / fixed over 2 seed(s)"), "{text}");
    assert!(text.lines().any(|l| l.starts_with("throughput") && l.contains('±')));
}

#[test]
fn speed_reports_cells() {
    let o = cellflow(&["speed", "--scenario", "grid-8x8-v0", "--scenario", "single-intersection-v0", "--steps", "200", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0], ["scenario", "intersections", "cells", "steps", "wall_s", "steps_per_s", "speedup"]);
    assert_eq!(&rows[1][..4], ["grid-8x8-v0", "64", "1170", "200"]);
    assert_eq!(&rows[2][..3], ["single-intersection-v0", "1", "24"]);
}

#[test]
fn fd_writes_points_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let points = dir.path().join("fd.csv");
    let o = cellflow(&["fd", "--levels", "9", "--out", points.to_str().unwrap(), "--format", "json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["free_flow_slope"].as_f64().unwrap() - 13.89).abs() < 1e-6);
    let csv = std::fs::read_to_string(points).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "demand,k,q,congested");
    assert_eq!(lines.next().unwrap(), "0.0,0.0,0.0,false");
    assert_eq!(lines.count(), 8);
}

#[test]
fn fd_rejects_too_few_levels() {
    let o = cellflow(&["fd", "--levels", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--levels"));
}

#[test]
fn record_writes_replay() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let o = cellflow(&["record", "--steps", "10", "--controller", "sotl", "--out", path.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let replay = read_replay(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(replay.frames.len(), 10);
    assert_eq!(replay.geometry.controller.as_deref(), Some("sotl"));
}

#[test]
fn record_reports_unwritable_path() {
    let o = cellflow(&["record", "--steps", "10", "--out", "/nonexistent/dir/run.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/dir/run.jsonl"));
}

#[test]
fn custom_networks_register_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let spec = cellflow_core::scenarios::gen_arterial(2).network;
    let mut json: serde_json::Value = serde_json::from_slice(&cellflow_core::network::save_network_json(&spec)).unwrap();
    json["metadata"]["name"] = "tiny-v0".into();
    std::fs::write(dir.path().join("tiny.json"), serde_json::to_vec(&json).unwrap()).unwrap();
    let o = cellflow(&["eval", "--networks", dir.path().to_str().unwrap(), "--scenario", "tiny-v0", "--seconds", "60", "--format", "csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("tiny-v0,fixed,0,"));
}

#[test]
fn errors_exit_nonzero() {
    let unknown = cellflow(&["eval", "--scenario", "moon-v0"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("unknown scenario 'moon-v0'"));
    let bad_controller = cellflow(&["eval", "--controller", "psychic"]);
    assert!(!bad_controller.status.success());
    let bad_replay = cellflow(&["serve", "--replay", "/nonexistent/run.jsonl", "--port", "0"]);
    assert_eq!(bad_replay.status.code(), Some(1));
    let no_subcommand = cellflow(&[]);
    assert!(!no_subcommand.status.success());
}

#[test]
fn serve_fails_when_port_is_taken() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let o = cellflow(&["serve", "--port", &port]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("cannot listen"), "{}", stderr(&o));
}
