use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use tw2_bus::inference::{EchoPolicyConfig, EchoPolicyServer};
use tw2_bus::latency::{measure_latency, EchoResponder};
use tw2_bus::recorder::{self, RecordConfig};
use tw2_bus::runner::{run_policy, RunnerConfig};
use tw2_bus::wire::{self, Handshake};
use tw2_bus::{Broker, BrokerConfig, BusClient};
use tw2_cli::config::{PipelineConfig, SourceConfig};
use tw2_cli::error::{bus_exit_code, CliError, EXIT_CONFIG, EXIT_RUNTIME};
use tw2_cli::sim_node::run_sim;
use tw2_cli::teleop::run_teleop;
use tw2_core::episode::{self, Episode, EpisodeHeader, Rates};
use tw2_core::motion::{gen_synthetic_motion, MotionKind};
use tw2_core::tracker::TrackerConfig;
use tw2_core::{CommandLayout, CommandVector, NormalizationStats, RobotModel};

#[derive(Parser)]
#[command(name = "tw2", version, about = "Humanoid teleoperation pipeline tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct BusArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "TW2_BUS_PORT", default_value_t = tw2_bus::DEFAULT_PORT)]
    port: u16,
}

impl BusArgs {
    fn addr(&self) -> Result<SocketAddr> {
        let s = format!("{}:{}", self.host, self.port);
        s.to_socket_addrs()?
            .next()
            .with_context(|| format!("cannot resolve {s}"))
    }
}

#[derive(Args, Clone)]
struct ModelArg {
    /// Robot model TOML; the built-in demo humanoid when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ModelArg {
    fn load(&self) -> Result<RobotModel, CliError> {
        match &self.model {
            Some(p) if !p.exists() => Err(CliError::Config(format!("model file {} does not exist", p.display()))),
            Some(p) => Ok(RobotModel::load(p)?),
            None => Ok(RobotModel::demo()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the message broker.
    Broker {
        #[command(flatten)]
        bus: BusArgs,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Run the full teleoperation loop.
    Teleop(TeleopArgs),
    /// Serve the tracker simulator on a running broker.
    Sim {
        #[command(flatten)]
        bus: BusArgs,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 50.0)]
        cmd_hz: f64,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Record CMD, STATE, frames and marks from a running broker.
    Record {
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        bus: BusArgs,
        #[command(flatten)]
        model: ModelArg,
        #[arg(long, default_value_t = 30.0)]
        record_hz: f64,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Split a recording at its episode marks, dropping failed spans.
    Segment {
        input: PathBuf,
        /// Directory for the kept segments; report only when omitted.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Compress idle stretches of a recording.
    Filter {
        input: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value_t = 2.0)]
        min_duration: f64,
    },
    /// Publish a recording's commands on the bus at their original timing.
    Replay {
        input: PathBuf,
        #[command(flatten)]
        bus: BusArgs,
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
    },
    /// Per-dimension command moments over one or more recordings.
    Stats {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write the normalization statistics as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute policy action chunks on the bus.
    RunPolicy {
        /// Broker carrying the inference endpoint.
        #[arg(long, env = "TW2_POLICY_ENDPOINT")]
        endpoint: Option<String>,
        #[command(flatten)]
        bus: BusArgs,
        #[command(flatten)]
        model: ModelArg,
        /// Normalization statistics JSON written by `stats --out`.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value_t = 200)]
        timeout_ms: u64,
    },
    /// Answer inference requests with the newest history entry.
    EchoPolicy {
        #[command(flatten)]
        bus: BusArgs,
        #[arg(long, default_value_t = 5)]
        latency_ms: u64,
        #[arg(long, default_value_t = 64)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        drift: f64,
        #[arg(long)]
        duration: Option<f64>,
    },
    /// Write a deterministic synthetic human motion pose file.
    GenMotion {
        #[arg(long, default_value = "walk")]
        kind: String,
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArg,
    },
    /// Measure bus round-trip latency.
    Latency {
        #[command(flatten)]
        bus: BusArgs,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 10)]
        interval_ms: u64,
        /// Start an in-process broker and echo responder.
        #[arg(long)]
        local: bool,
    },
}

#[derive(Args)]
struct TeleopArgs {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// synthetic, pose-file or bus-topic.
    #[arg(long)]
    source: Option<String>,
    #[arg(long)]
    motion: Option<MotionKind>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pose_file: Option<PathBuf>,
    #[arg(long)]
    duration: Option<f64>,
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long)]
    pose_hz: Option<f64>,
    #[arg(long)]
    cmd_hz: Option<f64>,
    #[arg(long)]
    record_hz: Option<f64>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long, env = "TW2_BUS_PORT")]
    bus_port: Option<u16>,
    #[arg(long, env = "TW2_BRIDGE_PORT")]
    bridge_port: Option<u16>,
    #[arg(long)]
    bridge: bool,
    #[arg(long)]
    external_broker: bool,
}

impl TeleopArgs {
    fn config(&self) -> Result<PipelineConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        if let Some(m) = &self.model {
            cfg.model = Some(m.clone());
        }
        let (motion, seed) = match &cfg.source {
            SourceConfig::Synthetic { motion, seed } => (*motion, *seed),
            _ => (MotionKind::Walk, 7),
        };
        match self.source.as_deref() {
            None => {}
            Some("synthetic") => cfg.source = SourceConfig::Synthetic { motion, seed },
            Some("pose-file") => {
                let path = self
                    .pose_file
                    .clone()
                    .ok_or_else(|| CliError::Config("--source pose-file needs --pose-file".into()))?;
                cfg.source = SourceConfig::PoseFile { path };
            }
            Some("bus-topic") => cfg.source = SourceConfig::BusTopic,
            Some(other) => return Err(CliError::Config(format!("unknown source `{other}`"))),
        }
        if self.source.is_none() {
            if let Some(path) = &self.pose_file {
                cfg.source = SourceConfig::PoseFile { path: path.clone() };
            }
        }
        if let SourceConfig::Synthetic { motion, seed } = &mut cfg.source {
            *motion = self.motion.unwrap_or(*motion);
            *seed = self.seed.unwrap_or(*seed);
        }
        if let Some(v) = self.duration {
            cfg.duration_s = v;
        }
        if let Some(p) = &self.record {
            cfg.record = Some(p.clone());
        }
        if let Some(v) = self.pose_hz {
            cfg.rates.pose_hz = v;
        }
        if let Some(v) = self.cmd_hz {
            cfg.rates.cmd_hz = v;
        }
        if let Some(v) = self.record_hz {
            cfg.rates.record_hz = v;
        }
        if let Some(h) = &self.host {
            cfg.ports.host = h.clone();
        }
        if let Some(p) = self.bus_port {
            cfg.ports.bus = p;
        }
        if let Some(p) = self.bridge_port {
            cfg.ports.bridge = p;
        }
        cfg.bridge |= self.bridge;
        cfg.external_broker |= self.external_broker;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Set by SIGINT; every long-running verb polls it.
fn interrupt_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst)) {
        log::warn!("cannot install SIGINT handler: {e}");
    }
    flag
}

fn wait(stop: &AtomicBool, duration: Option<f64>) {
    let start = Instant::now();
    while !stop.load(Ordering::Relaxed) && duration.is_none_or(|d| start.elapsed().as_secs_f64() < d) {
        thread::sleep(Duration::from_millis(20));
    }
}

fn secs(v: Option<f64>) -> Result<Option<Duration>> {
    match v {
        Some(s) if !(s > 0.0) || !s.is_finite() => Err(CliError::Config(format!("duration must be positive, got {s}")).into()),
        Some(s) => Ok(Some(Duration::from_secs_f64(s))),
        None => Ok(None),
    }
}

fn header_for(model: &RobotModel, record_hz: f64) -> EpisodeHeader {
    let layout = CommandLayout::from_model(model);
    EpisodeHeader {
        proprio_joints: layout.actuated_dof(),
        layout,
        normalization: None,
        rates: Rates {
            record_hz,
            ..Rates::default()
        },
        model_hash: model.hash().to_string(),
        created_at: wire::now_ns(),
    }
}

fn segment_name(input: &Path, i: usize) -> String {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("episode");
    format!("{stem}_{i:03}.tw2e")
}

fn run(cli: Cli) -> Result<()> {
    let stop = interrupt_flag();
    match cli.command {
        Command::Broker { bus, duration } => {
            let handle = Broker::start(BrokerConfig {
                addr: format!("{}:{}", bus.host, bus.port),
                ..Default::default()
            })?;
            println!("broker listening on {}", handle.local_addr());
            wait(&stop, duration);
            let s = handle.stats();
            println!(
                "forwarded {}  dropped {}  protocol errors {}  connections {}",
                s.forwarded, s.dropped, s.protocol_errors, s.connections
            );
            handle.shutdown();
        }
        Command::Teleop(args) => {
            let cfg = args.config()?;
            let report = run_teleop(&cfg, &AtomicBool::new(false), &stop)?;
            println!("{report}");
        }
        Command::Sim {
            bus,
            model,
            alpha,
            cmd_hz,
            duration,
        } => {
            let model = model.load()?;
            let addr = bus.addr()?;
            let flag = stop.clone();
            if let Some(d) = secs(duration)? {
                thread::spawn(move || {
                    thread::sleep(d);
                    flag.store(true, Ordering::SeqCst);
                });
            }
            let r = run_sim(addr, &model, &TrackerConfig::default(), alpha, cmd_hz, &stop)?;
            println!(
                "commands {}  rejected {}  r_track mean {:.4}  min {:.4}",
                r.commands, r.rejected, r.mean_r_track, r.min_r_track
            );
        }
        Command::Record {
            out,
            bus,
            model,
            record_hz,
            duration,
        } => {
            let model = model.load()?;
            let cfg = RecordConfig {
                record_hz,
                duration: secs(duration)?,
                ..Default::default()
            };
            let s = recorder::record(bus.addr()?, &out, header_for(&model, record_hz), &cfg, stop)?;
            println!(
                "{}: {} records, {} marks, {} gaps, {} frames, {} rejected",
                out.display(),
                s.records,
                s.marks,
                s.gaps,
                s.frames,
                s.rejected
            );
        }
        Command::Segment { input, out_dir } => {
            let ep = Episode::read(&input)?;
            for m in &ep.marks {
                println!("mark {:<14} {}", format!("{:?}", m.kind), m.timestamp);
            }
            let (parts, report) = episode::segment(&ep);
            for (i, p) in parts.iter().enumerate() {
                let (a, b) = (p.records[0].timestamp, p.records[p.len() - 1].timestamp);
                print!("segment {i}: {} records, {a}..={b}", p.len());
                if let Some(dir) = &out_dir {
                    std::fs::create_dir_all(dir)?;
                    let path = dir.join(segment_name(&input, i));
                    p.write(&path)?;
                    print!(" -> {}", path.display());
                }
                println!();
            }
            print_report(&report);
        }
        Command::Filter {
            input,
            out,
            eps,
            min_duration,
        } => {
            let ep = Episode::read(&input)?;
            let (filtered, report) = episode::filter_idle(&ep, eps, min_duration)?;
            filtered.write(&out)?;
            print_report(&report);
        }
        Command::Replay { input, bus, speed } => {
            if !(speed > 0.0) {
                return Err(CliError::Config(format!("speed must be positive, got {speed}")).into());
            }
            let ep = Episode::read(&input)?;
            let n = recorder::replay(bus.addr()?, &ep, speed, &stop)?;
            println!("replayed {n} commands");
        }
        Command::Stats { inputs, out } => {
            let eps = inputs.iter().map(Episode::read).collect::<Result<Vec<_>, _>>()?;
            let stats = Episode::command_stats(&eps)?;
            let names = eps[0].header.layout.names();
            println!("{:<28} {:>14} {:>14}", "dimension", "mean", "std");
            for (i, name) in names.iter().enumerate() {
                println!("{name:<28} {:>14.6} {:>14.6}", stats.offset[i], stats.scale[i]);
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&stats)?)?;
            }
        }
        Command::RunPolicy {
            endpoint,
            bus,
            model,
            stats,
            duration,
            timeout_ms,
        } => {
            let model = model.load()?;
            let layout = CommandLayout::from_model(&model);
            let addr = match endpoint {
                Some(e) => e.to_socket_addrs()?.next().context("cannot resolve endpoint")?,
                None => bus.addr()?,
            };
            let mut cfg = RunnerConfig::new(CommandVector::zeros(&layout).flatten(&layout)?);
            cfg.duration = secs(duration)?;
            cfg.timeout = Duration::from_millis(timeout_ms);
            if let Some(p) = stats {
                let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                let s: NormalizationStats =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                cfg.normalization = Some(s);
            }
            let r = run_policy(addr, &layout, cfg, stop)?;
            println!(
                "ticks {}  rate {:.2} Hz  chunks {}  requests {}  failures {}  starvation {}  inference p99 {:.1} ms",
                r.ticks,
                r.rate_hz,
                r.scheduler.switches,
                r.requests,
                r.failures,
                r.scheduler.starvation_events,
                r.inference_p99_ms
            );
        }
        Command::EchoPolicy {
            bus,
            latency_ms,
            steps,
            drift,
            duration,
        } => {
            let server = EchoPolicyServer::start(
                bus.addr()?,
                EchoPolicyConfig {
                    latency: Duration::from_millis(latency_ms),
                    steps,
                    drift,
                    answer_limit: None,
                },
            )?;
            wait(&stop, duration);
            println!("answered {} requests", server.stop());
        }
        Command::GenMotion {
            kind,
            duration,
            seed,
            out,
            model,
        } => {
            let kind: MotionKind = kind.parse().map_err(|e: tw2_core::MotionError| CliError::Config(e.to_string()))?;
            let model = model.load()?;
            let motion = gen_synthetic_motion(&model, kind, duration, seed)?;
            motion.write(&out)?;
            println!("{}: {} frames of {kind}", out.display(), motion.len());
        }
        Command::Latency {
            bus,
            count,
            interval_ms,
            local,
        } => {
            let mut broker = None;
            let addr = if local {
                let b = Broker::start(BrokerConfig {
                    addr: "127.0.0.1:0".into(),
                    ..Default::default()
                })?;
                let a = b.local_addr();
                broker = Some(b);
                a
            } else {
                bus.addr()?
            };
            let echo = if local { Some(EchoResponder::start(addr)?) } else { None };
            let client = BusClient::connect(addr, Handshake::new("latency", None, &[tw2_bus::MsgType::Latency]))?;
            if let Some(b) = &broker {
                while b.stats().active < 2 {
                    thread::sleep(Duration::from_millis(5));
                }
            }
            let r = measure_latency(&client, count, Duration::from_millis(interval_ms))?;
            println!(
                "round trip over {count} echoes: p50 {:.3} ms  p99 {:.3} ms  max {:.3} ms  (one-way p99 {:.3} ms)",
                r.p50_ms(),
                r.p99_ms(),
                r.max_ms(),
                r.one_way_p99_ms()
            );
            if let Some(e) = echo {
                e.stop();
            }
        }
    }
    Ok(())
}

fn print_report(r: &episode::FilterReport) {
    println!(
        "input {}  output {}  idle removed {}  dropped {}  kept {}  dropped episodes {}",
        r.input_records, r.output_records, r.idle_removed, r.dropped_records, r.episodes_kept, r.episodes_dropped
    );
    for reason in &r.reasons {
        println!("dropped: {reason}");
    }
    for w in &r.warnings {
        println!("warning: {w}");
    }
}

fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<CliError>() {
        e.exit_code()
    } else if let Some(e) = err.downcast_ref::<tw2_bus::BusError>() {
        bus_exit_code(e)
    } else if err.downcast_ref::<tw2_core::ModelError>().is_some() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
