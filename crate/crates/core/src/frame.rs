//! Wire format for live streaming and recorded replays.
//!
//! Every message is a JSON object carrying `v` (protocol version) and a
//! `kind` discriminator. A replay file is newline-delimited JSON: one
//! geometry record followed by one frame record per step.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, Interim};
use crate::error::ReplayError;
use crate::network::CompiledNetwork;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryNode {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub signalized: bool,
    /// Signal slot (index into a frame's `signals`) when signalized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal: Option<usize>,
    pub n_phases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeometryLink {
    pub id: String,
    pub from: String,
    pub to: String,
    pub polyline: Vec<[f64; 2]>,
    /// Cells `first_cell .. first_cell + n_cells` of a frame's `densities`, upstream first.
    pub first_cell: usize,
    pub n_cells: usize,
    pub lanes: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub scenario: String,
    pub dt: f64,
    pub n_cells: usize,
    pub nodes: Vec<GeometryNode>,
    pub links: Vec<GeometryLink>,
    /// "live" or "replay".
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<String>,
    #[serde(default)]
    pub scenarios: Vec<String>,
    #[serde(default)]
    pub controllers: Vec<String>,
}

impl Geometry {
    pub fn of(net: &CompiledNetwork, scenario: &str) -> Self {
        let slot_of = |n: usize| net.signalized_nodes.iter().position(|&s| s as usize == n);
        let nodes = net
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| GeometryNode {
                id: n.id.clone(),
                x: n.position[0],
                y: n.position[1],
                signalized: n.signalized,
                signal: slot_of(i),
                n_phases: n.n_phases,
            })
            .collect();
        let links = net
            .links
            .iter()
            .map(|l| GeometryLink {
                id: l.id.clone(),
                from: net.nodes[l.from_node as usize].id.clone(),
                to: net.nodes[l.to_node as usize].id.clone(),
                polyline: l.geometry.clone(),
                first_cell: l.first_cell as usize,
                n_cells: l.n_cells as usize,
                lanes: l.lanes,
            })
            .collect();
        Self {
            scenario: scenario.into(),
            dt: net.dt,
            n_cells: net.n_cells(),
            nodes,
            links,
            mode: "live".into(),
            controller: None,
            scenarios: Vec::new(),
            controllers: Vec::new(),
        }
    }

    pub fn n_signals(&self) -> usize {
        self.nodes.iter().filter(|n| n.signal.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalView {
    pub phase: usize,
    pub interim: Interim,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub queue: f64,
    pub throughput_cum: f64,
    pub mean_speed: f64,
    pub delay_cum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub t: f64,
    /// Per cell, vehicles over jam vehicles.
    pub densities: Vec<f64>,
    pub signals: Vec<SignalView>,
    pub metrics: FrameMetrics,
}

impl StateFrame {
    pub fn capture(engine: &Engine) -> Self {
        let net = engine.network();
        let st = engine.state();
        let m = engine.metrics();
        Self {
            t: st.clock,
            densities: st.vehicles.iter().zip(&net.cell_jam_veh).map(|(v, j)| (v / j).clamp(0.0, 1.0)).collect(),
            signals: st.signal.nodes.iter().map(|s| SignalView { phase: s.current_phase, interim: s.interim }).collect(),
            metrics: FrameMetrics {
                queue: m.total_queue,
                throughput_cum: st.cumulative_exited,
                mean_speed: m.mean_speed,
                delay_cum: st.cumulative_delay,
            },
        }
    }

    /// Whether this frame fits `geo` (cell and signal counts).
    pub fn matches(&self, geo: &Geometry) -> bool {
        self.densities.len() == geo.n_cells && self.signals.len() == geo.n_signals()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    /// Name of the acknowledged command.
    pub cmd: String,
    pub ok: bool,
    /// Simulation time at which the command takes effect.
    pub applied_at_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmd: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct End {
    pub t: f64,
    pub frames: u64,
}

/// Server-to-client payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ServerMessage {
    Geometry(Geometry),
    Frame(StateFrame),
    Ack(Ack),
    Error(ErrorMessage),
    End(End),
}

/// Steering commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "cmd", rename_all = "snake_case")]
pub enum Command {
    Pause,
    Resume,
    SetSpeed { speed: f64 },
    SetController { name: String },
    SetScenario { name: String },
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pause => "pause",
            Command::Resume => "resume",
            Command::SetSpeed { .. } => "set_speed",
            Command::SetController { .. } => "set_controller",
            Command::SetScenario { .. } => "set_scenario",
            Command::Reset { .. } => "reset",
        }
    }
}

/// Client-to-server payloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClientMessage {
    Command(Command),
}

/// A payload stamped with the protocol version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub v: u32,
    #[serde(flatten)]
    pub body: T,
}

impl<T: Serialize> Envelope<T> {
    pub fn new(body: T) -> Self {
        Self { v: PROTOCOL_VERSION, body }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("protocol messages serialize")
    }
}

pub fn encode(msg: ServerMessage) -> String {
    Envelope::new(msg).to_json()
}

/// Parses a server message, rejecting other protocol versions.
pub fn decode_server(text: &str) -> Result<ServerMessage, String> {
    let env: Envelope<ServerMessage> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    check_version(env.v)?;
    Ok(env.body)
}

pub fn decode_command(text: &str) -> Result<Command, String> {
    let env: Envelope<ClientMessage> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    check_version(env.v)?;
    let ClientMessage::Command(cmd) = env.body;
    Ok(cmd)
}

pub fn encode_command(cmd: Command) -> String {
    Envelope::new(ClientMessage::Command(cmd)).to_json()
}

fn check_version(v: u32) -> Result<(), String> {
    if v == PROTOCOL_VERSION {
        Ok(())
    } else {
        Err(format!("unsupported protocol version {v}, expected {PROTOCOL_VERSION}"))
    }
}

/// Writes a replay: the geometry header first, then one line per frame.
pub struct ReplayWriter<W: Write> {
    out: W,
    frames: u64,
}

impl<W: Write> ReplayWriter<W> {
    pub fn new(mut out: W, mut geometry: Geometry) -> std::io::Result<Self> {
        geometry.mode = "replay".into();
        writeln!(out, "{}", encode(ServerMessage::Geometry(geometry)))?;
        Ok(Self { out, frames: 0 })
    }

    pub fn write(&mut self, frame: StateFrame) -> std::io::Result<()> {
        self.frames += 1;
        writeln!(self.out, "{}", encode(ServerMessage::Frame(frame)))
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub geometry: Geometry,
    pub frames: Vec<StateFrame>,
}

/// Reads a whole replay. Frame indices in errors count from 0.
pub fn read_replay(input: impl BufRead) -> Result<Replay, ReplayError> {
    match read_replay_prefix(input)? {
        (replay, None) => Ok(replay),
        (_, Some(err)) => Err(err),
    }
}

/// Reads the header and every frame up to the first bad one, returning that
/// frame's error alongside the good prefix. Only a bad header fails outright.
pub fn read_replay_prefix(input: impl BufRead) -> Result<(Replay, Option<ReplayError>), ReplayError> {
    let mut lines = input.lines();
    let header = match lines.next() {
        None => return Err(ReplayError::MissingHeader),
        Some(line) => line.map_err(|e| ReplayError::Header(e.to_string()))?,
    };
    let geometry = match decode_server(&header).map_err(ReplayError::Header)? {
        ServerMessage::Geometry(g) => g,
        other => return Err(ReplayError::Header(format!("expected a geometry record, found {}", kind_of(&other)))),
    };
    let mut frames = Vec::new();
    let mut failure = None;
    for (index, line) in lines.enumerate() {
        match parse_frame(line, index, &geometry) {
            Ok(Some(frame)) => frames.push(frame),
            Ok(None) => {}
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    Ok((Replay { geometry, frames }, failure))
}

fn parse_frame(line: std::io::Result<String>, index: usize, geometry: &Geometry) -> Result<Option<StateFrame>, ReplayError> {
    let line = line.map_err(|e| ReplayError::Frame { index, message: e.to_string() })?;
    if line.trim().is_empty() {
        return Ok(None);
    }
    let frame = match decode_server(&line).map_err(|message| ReplayError::Frame { index, message })? {
        ServerMessage::Frame(f) => f,
        other => return Err(ReplayError::Frame { index, message: format!("expected a frame record, found {}", kind_of(&other)) }),
    };
    if !frame.matches(geometry) {
        return Err(ReplayError::Frame { index, message: "frame does not match the header geometry".into() });
    }
    Ok(Some(frame))
}

fn kind_of(m: &ServerMessage) -> &'static str {
    match m {
        ServerMessage::Geometry(_) => "geometry",
        ServerMessage::Frame(_) => "frame",
        ServerMessage::Ack(_) => "ack",
        ServerMessage::Error(_) => "error",
        ServerMessage::End(_) => "end",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineConfig;
    use crate::scenarios::gen_single_intersection;

    fn sample_engine(steps: usize) -> Engine {
        let mut e = gen_single_intersection().engine(EngineConfig::default()).unwrap();
        for i in 0..steps {
            e.step(&[(i / 20) % 2]).unwrap();
        }
        e
    }

    #[test]
    fn frame_round_trip_is_exact() {
        let f = StateFrame::capture(&sample_engine(57));
        let text = encode(ServerMessage::Frame(f.clone()));
        assert!(text.starts_with("{\"v\":1,\"kind\":\"frame\""), "{text}");
        assert_eq!(decode_server(&text).unwrap(), ServerMessage::Frame(f.clone()));
        let again = encode(decode_server(&text).unwrap());
        assert_eq!(text, again);
    }

    #[test]
    fn frame_shape() {
        let e = sample_engine(30);
        let f = StateFrame::capture(&e);
        assert_eq!(f.densities.len(), 24);
        assert!(f.densities.iter().all(|d| (0.0..=1.0).contains(d)));
        assert_eq!(f.signals.len(), 1);
        assert_eq!(f.t, 30.0);
        assert!(f.matches(&Geometry::of(e.network(), "single-intersection-v0")));
    }

    #[test]
    fn geometry_describes_network() {
        let e = sample_engine(0);
        let g = Geometry::of(e.network(), "single-intersection-v0");
        assert_eq!(g.nodes.len(), 5);
        assert_eq!(g.links.len(), 8);
        assert_eq!(g.n_signals(), 1);
        assert_eq!(g.links.iter().map(|l| l.n_cells).sum::<usize>(), g.n_cells);
        assert!(g.links.iter().all(|l| l.polyline.len() >= 2));
        let text = encode(ServerMessage::Geometry(g.clone()));
        assert_eq!(decode_server(&text).unwrap(), ServerMessage::Geometry(g));
    }

    #[test]
    fn commands_parse() {
        let cases = [
            (r#"{"v":1,"kind":"command","cmd":"pause"}"#, Command::Pause),
            (r#"{"v":1,"kind":"command","cmd":"set_speed","speed":10}"#, Command::SetSpeed { speed: 10.0 }),
            (r#"{"v":1,"kind":"command","cmd":"set_controller","name":"maxpressure"}"#, Command::SetController { name: "maxpressure".into() }),
            (r#"{"v":1,"kind":"command","cmd":"reset"}"#, Command::Reset { seed: None }),
            (r#"{"v":1,"kind":"command","cmd":"reset","seed":4}"#, Command::Reset { seed: Some(4) }),
        ];
        for (text, cmd) in cases {
            assert_eq!(decode_command(text).unwrap(), cmd);
            assert_eq!(decode_command(&encode_command(cmd.clone())).unwrap(), cmd);
        }
        assert!(decode_command(r#"{"v":2,"kind":"command","cmd":"pause"}"#).unwrap_err().contains("version"));
        assert!(decode_command(r#"{"v":1,"kind":"command","cmd":"fly"}"#).is_err());
    }

    #[test]
    fn ack_and_end_messages() {
        let ack = encode(ServerMessage::Ack(Ack { cmd: "pause".into(), ok: true, applied_at_t: 12.0 }));
        assert_eq!(ack, r#"{"v":1,"kind":"ack","cmd":"pause","ok":true,"applied_at_t":12.0}"#);
        let end = encode(ServerMessage::End(End { t: 10.0, frames: 10 }));
        assert_eq!(decode_server(&end).unwrap(), ServerMessage::End(End { t: 10.0, frames: 10 }));
    }

    fn recorded(steps: usize) -> Vec<u8> {
        let mut e = sample_engine(0);
        let mut w = ReplayWriter::new(Vec::new(), Geometry::of(e.network(), "single-intersection-v0")).unwrap();
        for i in 0..steps {
            e.step(&[(i / 20) % 2]).unwrap();
            w.write(StateFrame::capture(&e)).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn replay_round_trip() {
        let bytes = recorded(10);
        assert_eq!(bytes.iter().filter(|&&b| b == b'\n').count(), 11);
        let r = read_replay(&bytes[..]).unwrap();
        assert_eq!(r.geometry.mode, "replay");
        assert_eq!(r.frames.len(), 10);
        assert!(r.frames.windows(2).all(|w| w[0].t < w[1].t));
    }

    #[test]
    fn truncated_replay_names_frame() {
        let bytes = recorded(10);
        let text = String::from_utf8(bytes).unwrap();
        let cut = text.len() - 40;
        match read_replay(&text.as_bytes()[..cut]) {
            Err(ReplayError::Frame { index, .. }) => assert_eq!(index, 9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_header_errors() {
        assert!(matches!(read_replay(&b""[..]), Err(ReplayError::MissingHeader)));
        let frame_first = encode(ServerMessage::End(End { t: 0.0, frames: 0 }));
        assert!(matches!(read_replay(frame_first.as_bytes()), Err(ReplayError::Header(_))));
        assert!(matches!(read_replay(&b"{not json\n"[..]), Err(ReplayError::Header(_))));
    }

    #[test]
    fn mismatched_frame_rejected() {
        let bytes = recorded(3);
        let mut text = String::from_utf8(bytes).unwrap();
        let mut f = StateFrame::capture(&sample_engine(4));
        f.densities.pop();
        text.push_str(&encode(ServerMessage::Frame(f)));
        text.push('\n');
        assert!(matches!(read_replay(text.as_bytes()), Err(ReplayError::Frame { index: 3, .. })));
    }

    #[test]
    fn prefix_reader_keeps_good_frames() {
        let text = String::from_utf8(recorded(10)).unwrap();
        let cut = text.len() - 40;
        let (replay, err) = read_replay_prefix(&text.as_bytes()[..cut]).unwrap();
        assert_eq!(replay.frames.len(), 9);
        assert!(matches!(err, Some(ReplayError::Frame { index: 9, .. })));
        let (replay, err) = read_replay_prefix(text.as_bytes()).unwrap();
        assert_eq!((replay.frames.len(), err.is_none()), (10, true));
    }
}
