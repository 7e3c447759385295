use std::future::Future;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, Utf8Bytes, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{Html, IntoResponse};
use axum::routing::get;
use axum::Router;
use cellflow_core::frame::{decode_command, encode, ErrorMessage};
use cellflow_core::{Command, ServerMessage};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, oneshot, watch, Notify};
use tokio::time::{sleep_until, Instant};
use tower_http::services::ServeDir;

use crate::session::{Advance, Session, Source};
use crate::VizError;

pub const DEFAULT_PORT: u16 = 8765;
pub const DEFAULT_MAX_FPS: f64 = 20.0;

/// A slow client may fall this many messages behind before it skips ahead.
const CLIENT_BUFFER: usize = 1024;
/// Falling further behind the wall clock than this drops the backlog.
const MAX_LAG: Duration = Duration::from_secs(1);

const FALLBACK_INDEX: &str = include_str!("index.html");

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub addr: SocketAddr,
    pub source: Source,
    /// Simulated seconds per wall second.
    pub speed: f64,
    /// Frames per wall second before frames are skipped.
    pub max_fps: f64,
    /// Directory of dashboard assets served at `/`.
    pub assets: Option<PathBuf>,
}

impl ServerConfig {
    pub fn new(source: Source) -> Self {
        Self {
            addr: SocketAddr::from((Ipv4Addr::LOCALHOST, DEFAULT_PORT)),
            source,
            speed: 1.0,
            max_fps: DEFAULT_MAX_FPS,
            assets: None,
        }
    }
}

type Request = (Command, oneshot::Sender<Utf8Bytes>);

#[derive(Clone)]
struct Hub {
    out: broadcast::Sender<Utf8Bytes>,
    geometry: watch::Receiver<Utf8Bytes>,
    commands: mpsc::Sender<Request>,
    joined: Arc<Notify>,
}

/// A bound listener with its session, ready to run.
pub struct Server {
    listener: TcpListener,
    session: Session,
    config: ServerConfig,
}

impl Server {
    /// Opens the session and binds the port; fails if either is unusable.
    pub async fn bind(config: ServerConfig) -> Result<Self, VizError> {
        let mut session = Session::open(&config.source)?;
        session.set_speed(config.speed)?;
        if !(config.max_fps > 0.0 && config.max_fps.is_finite()) {
            return Err(VizError::FrameRate(config.max_fps));
        }
        let listener = TcpListener::bind(config.addr).await.map_err(|source| VizError::Bind { addr: config.addr, source })?;
        Ok(Self { listener, session, config })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub async fn run(self) -> Result<(), VizError> {
        self.run_until(std::future::pending()).await
    }

    /// Serves until `shutdown` resolves.
    pub async fn run_until(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), VizError> {
        let (out, _) = broadcast::channel(CLIENT_BUFFER);
        let (geo_tx, geometry) = watch::channel(text(ServerMessage::Geometry(self.session.geometry())));
        let (commands, cmd_rx) = mpsc::channel(64);
        let joined = Arc::new(Notify::new());
        let hub = Hub { out: out.clone(), geometry, commands, joined: joined.clone() };

        let sim = tokio::spawn(drive(self.session, self.config.max_fps, out, geo_tx, cmd_rx, joined));

        let app = Router::new().route("/ws", get(upgrade)).with_state(hub);
        let app = match &self.config.assets {
            Some(dir) => app.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
            None => app.route("/", get(|| async { Html(FALLBACK_INDEX) })),
        };
        let served = axum::serve(self.listener, app).with_graceful_shutdown(shutdown).await;
        sim.abort();
        served.map_err(VizError::Io)
    }
}

/// Binds, reports the address, and serves until the process is stopped.
pub fn serve(config: ServerConfig, on_ready: impl FnOnce(SocketAddr)) -> Result<(), VizError> {
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let server = Server::bind(config).await?;
        on_ready(server.local_addr());
        server.run().await
    })
}

fn text(msg: ServerMessage) -> Utf8Bytes {
    Utf8Bytes::from(encode(msg))
}

/// Steps per emitted frame so the frame rate stays at or under `max_fps`.
fn stride(session: &Session, max_fps: f64) -> u64 {
    let steps_per_s = session.speed() / session.dt();
    (steps_per_s / max_fps).ceil().max(1.0) as u64
}

/// The simulation loop: sole owner of the session. Commands are applied
/// between steps; output goes to every client through `out`.
async fn drive(
    mut session: Session,
    max_fps: f64,
    out: broadcast::Sender<Utf8Bytes>,
    geometry: watch::Sender<Utf8Bytes>,
    mut commands: mpsc::Receiver<Request>,
    joined: Arc<Notify>,
) {
    let publish = |msg: ServerMessage| {
        let t = text(msg.clone());
        if matches!(msg, ServerMessage::Geometry(_)) {
            geometry.send_replace(t.clone());
        }
        // No receivers just means nobody is watching.
        let _ = out.send(t);
    };
    let apply = |session: &mut Session, (cmd, reply): Request| {
        let r = session.handle(cmd);
        r.broadcast.into_iter().for_each(publish);
        let _ = reply.send(text(r.to_sender));
    };

    // Nothing runs until someone is watching, so the first client sees the first step.
    while out.receiver_count() == 0 {
        tokio::select! {
            _ = joined.notified() => {}
            req = commands.recv() => match req {
                Some(req) => apply(&mut session, req),
                None => return,
            },
        }
    }

    let mut anchor = Instant::now();
    let mut done: u64 = 0;
    let mut tick: u64 = 0;
    loop {
        if session.is_paused() || session.is_finished() {
            match commands.recv().await {
                Some(req) => apply(&mut session, req),
                None => return,
            }
            anchor = Instant::now();
            done = 0;
            continue;
        }
        let period = Duration::from_secs_f64(session.dt() / session.speed());
        let n = stride(&session, max_fps);
        let now = Instant::now();
        let due = (now.duration_since(anchor).as_secs_f64() / period.as_secs_f64()) as u64;
        while done < due {
            match session.advance() {
                Some(Advance::Frame(f)) => {
                    done += 1;
                    tick += 1;
                    if tick.is_multiple_of(n) {
                        publish(ServerMessage::Frame(f));
                    }
                }
                Some(Advance::Finished(msgs)) => {
                    msgs.into_iter().for_each(publish);
                    break;
                }
                None => break,
            }
            if now.duration_since(anchor + period.mul_f64(done as f64)) > MAX_LAG {
                anchor = now;
                done = 0;
                break;
            }
        }
        let next_emit = (tick / n + 1) * n - tick;
        let wake = anchor + period.mul_f64((done + next_emit) as f64);
        tokio::select! {
            req = commands.recv() => match req {
                Some(req) => {
                    let repace = matches!(req.0, Command::SetSpeed { .. } | Command::Reset { .. } | Command::SetScenario { .. });
                    apply(&mut session, req);
                    if repace {
                        anchor = Instant::now();
                        done = 0;
                    }
                }
                None => return,
            },
            _ = sleep_until(wake) => {}
        }
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(hub): State<Hub>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| client(socket, hub))
}

async fn client(mut socket: WebSocket, hub: Hub) {
    // Subscribe before reading the geometry so no later geometry change is missed.
    let mut rx = hub.out.subscribe();
    hub.joined.notify_one();
    let geometry = hub.geometry.borrow().clone();
    if socket.send(Message::Text(geometry)).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok(t) => {
                    if socket.send(Message::Text(t)).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(_)) => {}
                Err(broadcast::error::RecvError::Closed) => return,
            },
            incoming = socket.recv() => {
                let reply = match incoming {
                    Some(Ok(Message::Text(t))) => match decode_command(&t) {
                        Ok(cmd) => {
                            let (tx, rx) = oneshot::channel();
                            if hub.commands.send((cmd, tx)).await.is_err() {
                                return;
                            }
                            match rx.await {
                                Ok(r) => r,
                                Err(_) => return,
                            }
                        }
                        Err(message) => text(ServerMessage::Error(ErrorMessage { cmd: None, message })),
                    },
                    Some(Ok(Message::Close(_))) | Some(Err(_)) | None => return,
                    Some(Ok(_)) => continue,
                };
                if socket.send(Message::Text(reply)).await.is_err() {
                    return;
                }
            }
        }
    }
}
