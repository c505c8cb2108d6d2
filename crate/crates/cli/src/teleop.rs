//! The full teleoperation loop in one process.
//!
//! pose source → retarget → command → session → bus → simulator → STATE,
//! with an optional recorder and websocket bridge on the same broker. The
//! loop owns the session: CTRL requests arriving on the bus are applied and
//! acknowledged here.

use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{info, warn};
use tw2_bus::bridge::start_bridge;
use tw2_bus::latency::percentile;
use tw2_bus::recorder::{record, RecordConfig, RecordStats};
use tw2_bus::wire::{self, CtrlEvent, Handshake, MsgType, FLAG_ACK};
use tw2_bus::{Broker, BrokerConfig, BrokerHandle, BusClient, Mode, Session};
use tw2_core::command::{CommandDeriver, PoseSample};
use tw2_core::episode::{EpisodeHeader, Rates};
use tw2_core::motion::{self, gen_synthetic_motion, Motion, MotionSample};
use tw2_core::retarget::{GraspCommand, GraspMode};
use tw2_core::tracker::TrackerConfig;
use tw2_core::{CommandLayout, Retargeter};

use crate::config::{PipelineConfig, SourceConfig};
use crate::error::CliError;
use crate::sim_node::{run_sim, SimReport};

#[derive(Debug, Clone, Default)]
pub struct TeleopReport {
    pub poses: u64,
    pub commands: u64,
    pub states: u64,
    pub skipped_frames: u64,
    pub degraded_frames: u64,
    pub delay_p50_ms: f64,
    pub delay_p99_ms: f64,
    pub delay_max_ms: f64,
    /// Broker queue drops plus commands that never produced a state.
    pub dropped: u64,
    pub sim: SimReport,
    pub records: Option<RecordStats>,
    pub final_mode: Option<Mode>,
    pub estopped: bool,
}

impl std::fmt::Display for TeleopReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "poses published      {}", self.poses)?;
        writeln!(f, "commands published   {}", self.commands)?;
        writeln!(f, "states received      {}", self.states)?;
        writeln!(f, "dropped messages     {}", self.dropped)?;
        writeln!(
            f,
            "pose-to-state delay  p50 {:.2} ms  p99 {:.2} ms  max {:.2} ms",
            self.delay_p50_ms, self.delay_p99_ms, self.delay_max_ms
        )?;
        writeln!(
            f,
            "r_track              mean {:.4}  min {:.4}",
            self.sim.mean_r_track, self.sim.min_r_track
        )?;
        if self.skipped_frames + self.degraded_frames > 0 {
            writeln!(
                f,
                "frames               {} skipped, {} degraded",
                self.skipped_frames, self.degraded_frames
            )?;
        }
        if let Some(r) = &self.records {
            writeln!(f, "records written      {} ({} marks, {} gaps)", r.records, r.marks, r.gaps)?;
        }
        if let Some(m) = self.final_mode {
            write!(f, "final mode           {}", m.name())?;
            if self.estopped {
                write!(f, " (estop)")?;
            }
        }
        Ok(())
    }
}

enum Source {
    Frames(std::vec::IntoIter<MotionSample>),
    Bus(Vec<String>),
}

/// The loop's bus endpoint and the session it owns.
struct Link {
    client: BusClient,
    session: Session,
    delays: Vec<u64>,
    states: u64,
    pending_pose: Option<MotionSample>,
    pose_links: Option<Vec<String>>,
}

impl Link {
    fn ack(&mut self, e: CtrlEvent) -> Result<(), CliError> {
        let a = self.session.apply(e);
        if !a.accepted {
            warn!("rejected `{}` in mode {}", e.name(), self.session.mode().name());
        }
        self.client.publish_at(MsgType::Ctrl, wire::now_ns(), FLAG_ACK, a.to_payload())?;
        Ok(())
    }

    /// Handles incoming messages until `deadline`. Returns the event when an
    /// operator request stopped the session.
    fn pump(&mut self, deadline: Instant) -> Result<Option<CtrlEvent>, CliError> {
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let msg = if left.is_zero() {
                self.client.try_recv()?
            } else {
                self.client.recv_timeout(left)?
            };
            let Some(m) = msg else { return Ok(None) };
            match m.kind {
                MsgType::State => {
                    if let Ok((cmd_ts, _)) = wire::parse_state(&m.payload) {
                        self.delays.push(wire::now_ns().saturating_sub(cmd_ts));
                        self.states += 1;
                    }
                }
                MsgType::Ctrl if !m.is_ack() => match wire::ctrl_event(&m.payload) {
                    Ok(e) => {
                        self.ack(e)?;
                        if self.session.mode() == Mode::Stopped {
                            return Ok(Some(e));
                        }
                    }
                    Err(err) => warn!("bad CTRL request: {err}"),
                },
                MsgType::Pose => {
                    if let Some(links) = &self.pose_links {
                        match motion::decode_sample(&m.payload, links) {
                            Ok(s) => self.pending_pose = Some(s),
                            Err(e) => warn!("bad POSE message: {e}"),
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

fn resolve(addr: &str) -> Result<SocketAddr, CliError> {
    addr.to_socket_addrs()?
        .next()
        .ok_or_else(|| CliError::Config(format!("cannot resolve {addr}")))
}

struct Workers {
    broker: Option<BrokerHandle>,
    addr: SocketAddr,
    sim_stop: Arc<AtomicBool>,
    sim: JoinHandle<Result<SimReport, CliError>>,
    rec_stop: Arc<AtomicBool>,
    recorder: Option<JoinHandle<Result<RecordStats, tw2_bus::BusError>>>,
    bridge: Option<tw2_bus::bridge::BridgeHandle>,
}

fn spawn_workers(cfg: &PipelineConfig, model: &tw2_core::RobotModel, layout: &CommandLayout) -> Result<Workers, CliError> {
    let broker = if cfg.external_broker {
        None
    } else {
        Some(Broker::start(BrokerConfig {
            addr: cfg.bus_addr(),
            ..Default::default()
        })?)
    };
    let addr = match &broker {
        Some(b) => b.local_addr(),
        None => resolve(&cfg.bus_addr())?,
    };

    let sim_stop = Arc::new(AtomicBool::new(false));
    let sim = {
        let (model, stop) = (model.clone(), sim_stop.clone());
        let (alpha, cmd_hz) = (cfg.alpha, cfg.rates.cmd_hz);
        thread::Builder::new()
            .name("sim".into())
            .spawn(move || run_sim(addr, &model, &TrackerConfig::default(), alpha, cmd_hz, &stop))?
    };

    let rec_stop = Arc::new(AtomicBool::new(false));
    let recorder = match &cfg.record {
        Some(path) => {
            let header = EpisodeHeader {
                layout: layout.clone(),
                proprio_joints: layout.actuated_dof(),
                normalization: None,
                rates: Rates {
                    pose_hz: cfg.rates.pose_hz,
                    cmd_hz: cfg.rates.cmd_hz,
                    record_hz: cfg.rates.record_hz,
                },
                model_hash: model.hash().to_string(),
                created_at: wire::now_ns(),
            };
            let rc = RecordConfig {
                record_hz: cfg.rates.record_hz,
                ..Default::default()
            };
            let (path, stop): (PathBuf, _) = (path.clone(), rec_stop.clone());
            Some(
                thread::Builder::new()
                    .name("recorder".into())
                    .spawn(move || record(addr, path, header, &rc, stop))?,
            )
        }
        None => None,
    };
    let bridge = if cfg.bridge {
        Some(start_bridge(addr, &cfg.bridge_addr())?)
    } else {
        None
    };
    Ok(Workers {
        broker,
        addr,
        sim_stop,
        sim,
        rec_stop,
        recorder,
        bridge,
    })
}

/// Runs the loop until the source is exhausted, `duration_s` elapses, `stop`
/// is set (clean stop) or `estop` is set (emergency stop). Both stops emit a
/// final hold command and finalize the recording.
pub fn run_teleop(cfg: &PipelineConfig, stop: &AtomicBool, estop: &AtomicBool) -> Result<TeleopReport, CliError> {
    cfg.validate()?;
    let model = cfg.load_model()?;
    let layout = CommandLayout::from_model(&model);
    let mut source = match &cfg.source {
        SourceConfig::Synthetic { motion, seed } => {
            Source::Frames(gen_synthetic_motion(&model, *motion, cfg.duration_s, *seed)?.samples.into_iter())
        }
        SourceConfig::PoseFile { path } => Source::Frames(Motion::read(path)?.samples.into_iter()),
        SourceConfig::BusTopic => Source::Bus(motion::pose_links(&model)),
    };
    let links = motion::pose_links(&model);

    let w = spawn_workers(cfg, &model, &layout)?;
    let mut subs = vec![MsgType::State, MsgType::Ctrl];
    if matches!(source, Source::Bus(_)) {
        subs.push(MsgType::Pose);
    }
    let client = BusClient::connect(w.addr, Handshake::new("teleop", Some(layout.clone()), &subs))?;
    if let Some(b) = &w.broker {
        let expected = 2 + w.recorder.is_some() as usize;
        let deadline = Instant::now() + Duration::from_secs(5);
        while b.stats().active < expected && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
    } else {
        thread::sleep(Duration::from_millis(300));
    }

    let mut link = Link {
        client,
        session: Session::new(cfg.resume_s, cfg.rates.cmd_hz),
        delays: Vec::new(),
        states: 0,
        pending_pose: None,
        pose_links: match &source {
            Source::Bus(l) => Some(l.clone()),
            Source::Frames(_) => None,
        },
    };
    let mut report = TeleopReport::default();
    link.ack(CtrlEvent::Start)?;

    let mut retargeter = Retargeter::new(Arc::new(model.clone()));
    let mut deriver = CommandDeriver::default();
    let period = Duration::from_secs_f64(1.0 / cfg.rates.pose_hz);
    let started = Instant::now();
    let ratio = cfg.rates.cmd_hz / cfg.rates.pose_hz;
    let mut tick: u32 = 0;
    let mut result: Result<(), CliError> = Ok(());

    let end_event = loop {
        if estop.load(Ordering::Relaxed) {
            break CtrlEvent::Estop;
        }
        if stop.load(Ordering::Relaxed) || started.elapsed().as_secs_f64() >= cfg.duration_s {
            break CtrlEvent::Stop;
        }
        // Service the bus until this tick is due so delays are measured on arrival.
        match link.pump(started + period * tick) {
            Ok(Some(e)) => break e,
            Ok(None) => {}
            Err(e) => {
                result = Err(e);
                break CtrlEvent::Estop;
            }
        }

        let now = wire::now_ns();
        let sample = match &mut source {
            Source::Frames(it) => match it.next() {
                Some(mut s) => {
                    s.frame.timestamp = now;
                    link.client.publish_at(MsgType::Pose, now, 0, motion::encode_sample(&s, &links))?;
                    report.poses += 1;
                    Some(s)
                }
                None => break CtrlEvent::Stop,
            },
            Source::Bus(_) => link.pending_pose.take(),
        };

        let cmd_tick = tick == 0 || ((tick + 1) as f64 * ratio).floor() > (tick as f64 * ratio).floor();
        tick += 1;
        let Some(s) = sample.filter(|_| cmd_tick) else { continue };
        let ts = s.frame.timestamp;
        let grasp = |a: f64| GraspCommand::new(a.clamp(0.0, 1.0), GraspMode::Power);
        let r = match retargeter.retarget(&s.frame, &grasp(s.grasp[0])?, &grasp(s.grasp[1])?) {
            Ok(r) => r,
            Err(e) => {
                report.skipped_frames += 1;
                warn!("skipping frame: {e}");
                continue;
            }
        };
        report.degraded_frames += r.degraded as u64;
        let flat = deriver.push(PoseSample::from(&r))?.flatten(&layout)?;
        if let Some(out) = link.session.next(Some(&flat)) {
            if let Err(e) = link.client.publish_at(MsgType::Cmd, ts, 0, wire::cmd_payload(&out)) {
                result = Err(e.into());
                break CtrlEvent::Estop;
            }
            report.commands += 1;
        }
    };

    if link.session.mode() != Mode::Stopped {
        link.ack(end_event)?;
    }
    report.estopped = end_event == CtrlEvent::Estop;
    if let Some(hold) = link.session.next(None) {
        link.client.publish_at(MsgType::Cmd, wire::now_ns(), 0, wire::cmd_payload(&hold))?;
        report.commands += 1;
    }
    report.final_mode = Some(link.session.mode());

    let deadline = Instant::now() + Duration::from_secs(2);
    while link.states < report.commands && Instant::now() < deadline {
        link.pump(Instant::now() + Duration::from_millis(20))?;
    }
    report.states = link.states;
    let delays = std::mem::take(&mut link.delays);

    w.sim_stop.store(true, Ordering::Relaxed);
    report.sim = w.sim.join().expect("sim thread panicked")?;
    if let Some(r) = w.recorder {
        let deadline = Instant::now() + Duration::from_secs(2);
        while !r.is_finished() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(10));
        }
        w.rec_stop.store(true, Ordering::Relaxed);
        report.records = Some(r.join().expect("recorder thread panicked")?);
    }
    if let Some(b) = w.bridge {
        b.shutdown();
    }
    let broker_drops = w.broker.as_ref().map_or(0, |b| b.stats().dropped);
    report.dropped = broker_drops + report.commands.saturating_sub(report.states);
    report.delay_p50_ms = percentile(&delays, 50.0) as f64 / 1e6;
    report.delay_p99_ms = percentile(&delays, 99.0) as f64 / 1e6;
    report.delay_max_ms = delays.iter().copied().max().unwrap_or(0) as f64 / 1e6;
    info!("teleop finished: {} commands, {} states", report.commands, report.states);
    result.map(|_| report)
}
