use std::net::SocketAddr;
use std::time::{Duration, Instant};

use cellflow_core::frame::{decode_server, encode_command, read_replay, Ack, End};
use cellflow_core::runner::{record_to_file, EvalOptions};
use cellflow_core::scenarios::gen_single_intersection;
use cellflow_core::{Command, ControllerKind, Geometry, ServerMessage, StateFrame};
use cellflow_server::{LiveConfig, Server, ServerConfig, Source, VizError};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

fn config(source: Source, speed: f64, max_fps: f64) -> ServerConfig {
    ServerConfig { addr: "127.0.0.1:0".parse().unwrap(), speed, max_fps, ..ServerConfig::new(source) }
}

fn live(scenario: &str) -> Source {
    Source::Live(LiveConfig::new(scenario, ControllerKind::Fixed))
}

async fn start(cfg: ServerConfig) -> SocketAddr {
    let server = Server::bind(cfg).await.unwrap();
    let addr = server.local_addr();
    tokio::spawn(server.run());
    addr
}

async fn connect(addr: SocketAddr) -> Ws {
    connect_async(format!("ws://{addr}/ws")).await.unwrap().0
}

async fn next(ws: &mut Ws) -> ServerMessage {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(10), ws.next()).await.expect("server went quiet").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return decode_server(&t).unwrap();
        }
    }
}

async fn next_frame(ws: &mut Ws) -> StateFrame {
    loop {
        if let ServerMessage::Frame(f) = next(ws).await {
            return f;
        }
    }
}

async fn geometry(ws: &mut Ws) -> Geometry {
    match next(ws).await {
        ServerMessage::Geometry(g) => g,
        other => panic!("first message was {other:?}"),
    }
}

async fn send(ws: &mut Ws, cmd: Command) {
    ws.send(Message::Text(encode_command(cmd).into())).await.unwrap();
}

/// Sends `cmd` and returns its ack or error, collecting frames that arrive meanwhile.
async fn command(ws: &mut Ws, cmd: Command) -> (ServerMessage, Vec<StateFrame>) {
    send(ws, cmd).await;
    let mut frames = Vec::new();
    loop {
        match next(ws).await {
            ServerMessage::Frame(f) => frames.push(f),
            m @ (ServerMessage::Ack(_) | ServerMessage::Error(_)) => return (m, frames),
            _ => {}
        }
    }
}

fn ack(m: ServerMessage) -> Ack {
    match m {
        ServerMessage::Ack(a) => a,
        other => panic!("expected ack, got {other:?}"),
    }
}

#[tokio::test]
async fn geometry_comes_first() {
    let addr = start(config(live("single-intersection-v0"), 50.0, 20.0)).await;
    let mut ws = connect(addr).await;
    let g = geometry(&mut ws).await;
    assert_eq!((g.mode.as_str(), g.n_cells, g.n_signals()), ("live", 24, 1));
    let f = next_frame(&mut ws).await;
    assert!(f.matches(&g));
}

#[tokio::test]
async fn real_time_is_one_frame_per_second() {
    let addr = start(config(live("single-intersection-v0"), 1.0, 20.0)).await;
    let mut ws = connect(addr).await;
    geometry(&mut ws).await;
    let a = next_frame(&mut ws).await;
    let start = Instant::now();
    let b = next_frame(&mut ws).await;
    let c = next_frame(&mut ws).await;
    let wall = start.elapsed().as_secs_f64();
    assert_eq!((b.t - a.t, c.t - b.t), (1.0, 1.0));
    assert!((1.7..2.5).contains(&wall), "{wall}");
}

#[tokio::test]
async fn frame_rate_is_capped() {
    let addr = start(config(live("single-intersection-v0"), 200.0, 20.0)).await;
    let mut ws = connect(addr).await;
    geometry(&mut ws).await;
    let first = next_frame(&mut ws).await;
    let start = Instant::now();
    let mut frames = 0;
    while start.elapsed() < Duration::from_secs(1) {
        next_frame(&mut ws).await;
        frames += 1;
    }
    let last = next_frame(&mut ws).await;
    assert!(frames <= 22, "{frames} frames in a second");
    // Skipping thins the display only: simulated time keeps pace with the speed.
    assert!(last.t - first.t >= 150.0, "{} simulated seconds", last.t - first.t);
    assert_eq!(last.t % 10.0, 0.0);
}

#[tokio::test]
async fn clients_see_the_same_stream() {
    let addr = start(config(live("grid-2x2-v0"), 100.0, 100.0)).await;
    let mut a = connect(addr).await;
    let mut b = connect(addr).await;
    geometry(&mut a).await;
    geometry(&mut b).await;
    let mut fa = Vec::new();
    let mut fb = Vec::new();
    while fa.last().is_none_or(|f: &StateFrame| f.t < 60.0) {
        fa.push(next_frame(&mut a).await);
    }
    while fb.last().is_none_or(|f: &StateFrame| f.t < 60.0) {
        fb.push(next_frame(&mut b).await);
    }
    let from = fa[0].t.max(fb[0].t);
    let tail = |v: &[StateFrame]| v.iter().filter(|f| f.t >= from && f.t <= 60.0).cloned().collect::<Vec<_>>();
    assert!(tail(&fa).len() > 30);
    assert_eq!(tail(&fa), tail(&fb));
}

#[tokio::test]
async fn pause_stops_frames_and_resume_loses_no_steps() {
    let addr = start(config(live("single-intersection-v0"), 20.0, 20.0)).await;
    let mut ws = connect(addr).await;
    geometry(&mut ws).await;
    let mut seen = vec![next_frame(&mut ws).await];
    let (m, before) = command(&mut ws, Command::Pause).await;
    seen.extend(before);
    let paused_at = ack(m).applied_at_t;
    assert!(seen.last().unwrap().t <= paused_at);
    let quiet = tokio::time::timeout(Duration::from_millis(400), next(&mut ws)).await;
    match quiet {
        Err(_) => {}
        Ok(ServerMessage::Frame(f)) => panic!("frame at t={} after pause at {paused_at}", f.t),
        Ok(other) => panic!("{other:?}"),
    }
    let (m, _) = command(&mut ws, Command::Resume).await;
    assert_eq!(ack(m).applied_at_t, paused_at);
    while seen.last().unwrap().t < paused_at + 10.0 {
        seen.push(next_frame(&mut ws).await);
    }
    assert!(seen.windows(2).all(|w| w[1].t - w[0].t == 1.0), "{:?}", seen.iter().map(|f| f.t).collect::<Vec<_>>());
}

#[tokio::test]
async fn controller_swap_lands_on_decision_boundary() {
    let addr = start(config(live("single-intersection-v0"), 100.0, 100.0)).await;
    let mut ws = connect(addr).await;
    geometry(&mut ws).await;
    for _ in 0..3 {
        next_frame(&mut ws).await;
    }
    let issued = ack(command(&mut ws, Command::Pause).await.0).applied_at_t;
    let applied = ack(command(&mut ws, Command::SetController { name: "maxpressure".into() }).await.0).applied_at_t;
    assert!(applied >= issued && applied - issued <= 5.0, "issued {issued}, applied {applied}");
    assert_eq!(applied % 5.0, 0.0);
    ack(command(&mut ws, Command::Resume).await.0);
    let f = next_frame(&mut ws).await;
    assert!(f.t > issued);
}

#[tokio::test]
async fn bad_commands_get_errors() {
    let addr = start(config(live("single-intersection-v0"), 10.0, 20.0)).await;
    let mut ws = connect(addr).await;
    geometry(&mut ws).await;
    for cmd in [
        Command::SetController { name: "psychic".into() },
        Command::SetScenario { name: "moon-v0".into() },
        Command::SetSpeed { speed: 0.0 },
    ] {
        let name = cmd.name();
        match command(&mut ws, cmd).await.0 {
            ServerMessage::Error(e) => assert_eq!(e.cmd.as_deref(), Some(name)),
            other => panic!("{other:?}"),
        }
    }
    ws.send(Message::Text(r#"{"v":1,"kind":"command","cmd":"warp"}"#.into())).await.unwrap();
    loop {
        match next(&mut ws).await {
            ServerMessage::Error(e) => {
                assert_eq!(e.cmd, None);
                break;
            }
            ServerMessage::Frame(_) => {}
            other => panic!("{other:?}"),
        }
    }
    // The run carries on.
    next_frame(&mut ws).await;
}

#[tokio::test]
async fn scenario_switch_sends_new_geometry() {
    let addr = start(config(live("single-intersection-v0"), 50.0, 50.0)).await;
    let mut ws = connect(addr).await;
    geometry(&mut ws).await;
    send(&mut ws, Command::SetScenario { name: "grid-4x4-v0".into() }).await;
    let g = loop {
        if let ServerMessage::Geometry(g) = next(&mut ws).await {
            break g;
        }
    };
    assert_eq!(g.nodes.iter().filter(|n| n.signalized).count(), 16);
    assert!(next_frame(&mut ws).await.matches(&g));
    // Late joiners get the current geometry.
    let mut late = connect(addr).await;
    assert_eq!(geometry(&mut late).await.scenario, "grid-4x4-v0");
}

#[tokio::test]
async fn replay_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.jsonl");
    let opts = EvalOptions { seconds: 100, ..EvalOptions::new(ControllerKind::MaxPressure) };
    record_to_file(&gen_single_intersection(), &opts, 3, &path).unwrap();
    let recorded = read_replay(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();

    let addr = start(config(Source::Replay(path), 1000.0, 1000.0)).await;
    let mut ws = connect(addr).await;
    assert_eq!(geometry(&mut ws).await.mode, "replay");
    let mut frames = Vec::new();
    let end = loop {
        match next(&mut ws).await {
            ServerMessage::Frame(f) => frames.push(f),
            ServerMessage::End(e) => break e,
            other => panic!("{other:?}"),
        }
    };
    assert_eq!(end, End { t: 100.0, frames: 100 });
    assert_eq!(frames.len(), recorded.frames.len());
    let metrics = |v: &[StateFrame]| v.iter().map(|f| (f.t, f.metrics)).collect::<Vec<_>>();
    assert_eq!(metrics(&frames), metrics(&recorded.frames));

    match command(&mut ws, Command::SetController { name: "fixed".into() }).await.0 {
        ServerMessage::Error(e) => assert!(e.message.contains("replay")),
        other => panic!("{other:?}"),
    }
    ack(command(&mut ws, Command::SetSpeed { speed: 5.0 }).await.0);
}

#[tokio::test]
async fn static_index_is_served() {
    let addr = start(config(live("single-intersection-v0"), 1.0, 20.0)).await;
    let mut stream = TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream.write_all(b"GET / HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut body = String::new();
    stream.read_to_string(&mut body).await.unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.contains("/ws"));
}

#[tokio::test]
async fn port_in_use_is_a_startup_error() {
    let taken = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let cfg = ServerConfig { addr: taken.local_addr().unwrap(), ..config(live("single-intersection-v0"), 1.0, 20.0) };
    match Server::bind(cfg).await {
        Err(VizError::Bind { addr, .. }) => assert_eq!(addr, taken.local_addr().unwrap()),
        other => panic!("{:?}", other.err()),
    }
}

#[tokio::test]
async fn bad_startup_settings_are_rejected() {
    let unknown = Server::bind(config(live("moon-v0"), 1.0, 20.0)).await;
    assert!(matches!(unknown, Err(VizError::Scenario(_))));
    let fast = Server::bind(config(live("single-intersection-v0"), 5000.0, 20.0)).await;
    assert!(matches!(fast, Err(VizError::Speed(_))));
}
