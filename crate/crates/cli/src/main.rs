//! `cellflow`: speed benchmarks, fundamental-diagram sweeps, controller
//! evaluation, replay recording and the dashboard server.

mod report;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use cellflow_core::parallel::Execution;
use cellflow_core::runner::{self, EvalOptions};
use cellflow_core::scenarios::{builtin_names, DEFAULT_DECISION_INTERVAL};
use cellflow_core::{ControllerConfig, ControllerKind, Registry};
use cellflow_server::{LiveConfig, ServerConfig, Source};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::report::{EvalReport, FdSummary};

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

#[derive(Parser)]
#[command(name = "cellflow", version, about = "Cell Transmission Model traffic-signal simulator")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Time fixed-time runs on one or more scenarios.
    Speed(SpeedArgs),
    /// Sweep demand on a single link and fit both fundamental-diagram branches.
    Fd(FdArgs),
    /// Evaluate a controller over one or more seeds.
    Eval(EvalArgs),
    /// Record a run as a replay file.
    Record(RecordArgs),
    /// Serve the live dashboard, or play back a replay.
    Serve(ServeArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

#[derive(Args)]
struct Networks {
    /// Directory of extra JSON networks to register by name.
    #[arg(long, value_name = "DIR")]
    networks: Option<PathBuf>,
}

impl Networks {
    fn registry(&self) -> Result<Registry> {
        Ok(match &self.networks {
            Some(dir) => Registry::builtin().with_directory(dir)?,
            None => Registry::builtin(),
        })
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, default_value = "single-intersection-v0")]
    scenario: String,
    #[arg(long, default_value = "fixed")]
    controller: ControllerKind,
    /// Use start-up lost time and Poisson arrivals.
    #[arg(long)]
    mesoscopic: bool,
    /// Start-up lost time in seconds (mesoscopic mode).
    #[arg(long, default_value_t = 2.0)]
    lost_time: f64,
    #[arg(long)]
    min_green: Option<f64>,
    /// Steps between controller decisions.
    #[arg(long, default_value_t = 1)]
    decision_interval: usize,
    #[command(flatten)]
    networks: Networks,
}

impl RunArgs {
    fn options(&self, seconds: usize) -> EvalOptions {
        let mut controller = ControllerConfig::new(self.controller);
        if let Some(mg) = self.min_green {
            controller.min_green = mg;
        }
        EvalOptions { controller, seconds, decision_interval: self.decision_interval, lost_time: self.lost_time, mesoscopic: self.mesoscopic }
    }
}

#[derive(Args)]
struct SpeedArgs {
    /// Scenario to time; repeat for several. Defaults to every built-in.
    #[arg(long)]
    scenario: Vec<String>,
    #[arg(long, default_value_t = 10_000)]
    steps: usize,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(flatten)]
    networks: Networks,
}

#[derive(Args)]
struct FdArgs {
    /// Demand levels from zero to twice capacity.
    #[arg(long, default_value_t = 120)]
    levels: usize,
    /// Write the (k, q) points as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Run levels on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 3600)]
    seconds: usize,
    /// Number of seeds, counting up from --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Run seeds on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct RecordArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value_t = 3600, conflicts_with = "steps")]
    seconds: usize,
    /// Steps to record; overrides --seconds.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "single-intersection-v0")]
    scenario: String,
    #[arg(long, default_value = "fixed")]
    controller: ControllerKind,
    #[arg(long, default_value_t = cellflow_server::DEFAULT_PORT)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Play back this recording instead of simulating.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    mesoscopic: bool,
    #[arg(long, default_value_t = 2.0)]
    lost_time: f64,
    #[arg(long)]
    min_green: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_DECISION_INTERVAL)]
    decision_interval: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Simulated seconds per wall second.
    #[arg(long, default_value_t = 1.0)]
    speed: f64,
    /// Directory of dashboard assets to serve at `/`.
    #[arg(long)]
    assets: Option<PathBuf>,
    #[command(flatten)]
    networks: Networks,
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn speed(args: SpeedArgs) -> Result<()> {
    let registry = args.networks.registry()?;
    let names = if args.scenario.is_empty() { builtin_names() } else { args.scenario };
    let defs = names.iter().map(|n| registry.make(n)).collect::<std::result::Result<Vec<_>, _>>()?;
    let rows = defs.iter().map(|d| runner::speed(d, args.steps)).collect::<std::result::Result<Vec<_>, _>>()?;
    let stdout = std::io::stdout();
    match args.format {
        Format::Text => report::speed_text(&rows, stdout.lock())?,
        Format::Csv => report::write_csv(&rows, stdout.lock())?,
        Format::Json => report::write_json(&rows, stdout.lock())?,
    }
    Ok(())
}

fn fd(args: FdArgs) -> Result<()> {
    if args.levels < 2 {
        return Err("--levels must be at least 2".into());
    }
    let fd = runner::fundamental_diagram(args.levels, exec(args.sequential));
    if let Some(path) = &args.out {
        let file = std::fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
        report::write_csv(&fd.points, file)?;
    }
    let summary = FdSummary::of(&fd);
    let stdout = std::io::stdout();
    match args.format {
        Format::Text => report::fd_text(&summary, stdout.lock())?,
        Format::Csv => report::write_csv(&[summary], stdout.lock())?,
        Format::Json => report::write_json(&summary, stdout.lock())?,
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err("--seeds must be at least 1".into());
    }
    let def = args.run.networks.registry()?.make(&args.run.scenario)?;
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();
    let runs = runner::run_seeds(&def, &args.run.options(args.seconds), &seeds, exec(args.sequential))?;
    let rep = EvalReport::of(runs);
    let stdout = std::io::stdout();
    match args.format {
        Format::Text => report::eval_text(&rep, stdout.lock())?,
        Format::Csv => report::write_csv(&rep.rows(), stdout.lock())?,
        Format::Json => report::write_json(&rep, stdout.lock())?,
    }
    Ok(())
}

fn record(args: RecordArgs) -> Result<()> {
    let def = args.run.networks.registry()?.make(&args.run.scenario)?;
    let seconds = args.steps.map_or(args.seconds, |s| (s as f64 * def.network.dt).round() as usize);
    let frames = runner::record_to_file(&def, &args.run.options(seconds), args.seed, &args.out)?;
    eprintln!("wrote {frames} frames to {}", args.out.display());
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let source = match args.replay {
        Some(path) => Source::Replay(path),
        None => {
            let mut controller = ControllerConfig::new(args.controller);
            if let Some(mg) = args.min_green {
                controller.min_green = mg;
            }
            Source::Live(LiveConfig {
                scenario: args.scenario,
                controller,
                decision_interval: args.decision_interval,
                mesoscopic: args.mesoscopic,
                lost_time: args.lost_time,
                seed: args.seed,
                registry: args.networks.registry()?,
            })
        }
    };
    let config = ServerConfig { addr: SocketAddr::new(args.host, args.port), speed: args.speed, assets: args.assets, ..ServerConfig::new(source) };
    cellflow_server::serve(config, |addr| eprintln!("serving on http://{addr} (socket at ws://{addr}/ws)"))?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Speed(a) => speed(a),
        Cmd::Fd(a) => fd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Record(a) => record(a),
        Cmd::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
