//! Live episode capture from the bus, and replay of recorded commands.
//!
//! The recorder keeps the newest CMD, STATE and FRAME message and writes one
//! record per tick from whatever is newest; nothing is interpolated. Episode,
//! failure marks come from CTRL requests, pause marks from acknowledged pause
//! transitions. A command stream silent for longer than the gap threshold gets
//! one gap mark and no records until it resumes.

use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use tw2_core::episode::{Episode, EpisodeHeader, EpisodeWriter, Mark, MarkKind};
use tw2_core::policy::{Clock, MonotonicClock, Ticker};
use tw2_core::{CommandVector, ProprioState};

use crate::client::BusClient;
use crate::error::BusError;
use crate::wire::{self, CtrlAck, CtrlEvent, Handshake, Message, MsgType};

pub const DEFAULT_GAP: Duration = Duration::from_millis(500);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordStats {
    pub records: u64,
    pub marks: u64,
    pub gaps: u64,
    pub frames: u64,
    pub rejected: u64,
}

/// Message-driven recording state; the network loop feeds it.
pub struct Recorder<W: Write> {
    writer: EpisodeWriter<W>,
    gap_ns: u64,
    cmd: Option<(u64, Vec<f64>)>,
    cmd_seen_at: Option<u64>,
    state: Option<(u64, Vec<f64>)>,
    frame: Option<Vec<u8>>,
    in_gap: bool,
    stopped: bool,
    last_ts: u64,
    stats: RecordStats,
}

impl<W: Write> Recorder<W> {
    pub fn new(writer: EpisodeWriter<W>, gap: Duration) -> Self {
        Self {
            writer,
            gap_ns: gap.as_nanos() as u64,
            cmd: None,
            cmd_seen_at: None,
            state: None,
            frame: None,
            in_gap: false,
            stopped: false,
            last_ts: 0,
            stats: RecordStats::default(),
        }
    }

    pub fn stats(&self) -> RecordStats {
        self.stats
    }

    /// True after an accepted stop or estop was seen.
    pub fn stopped(&self) -> bool {
        self.stopped
    }

    fn mark(&mut self, ts: u64, kind: MarkKind, note: Option<String>) {
        self.writer.mark(Mark {
            timestamp: ts,
            kind,
            note,
        });
        self.stats.marks += 1;
    }

    /// Takes one bus message received at `now` (ns).
    pub fn on_message(&mut self, msg: &Message, now: u64) {
        match msg.kind {
            MsgType::Cmd if !msg.is_ack() && !msg.is_error() => {
                match wire::parse_cmd(&msg.payload, &self.writer.header().layout) {
                    Ok(flat) => {
                        self.cmd = Some((msg.timestamp, flat));
                        self.cmd_seen_at = Some(now);
                    }
                    Err(e) => {
                        self.stats.rejected += 1;
                        warn!("ignoring command: {e}");
                    }
                }
            }
            MsgType::State => match wire::parse_state(&msg.payload) {
                Ok((_, flat)) if flat.len() == ProprioState::flat_dim(self.writer.header().proprio_joints) => {
                    self.state = Some((msg.timestamp, flat));
                }
                _ => self.stats.rejected += 1,
            },
            MsgType::Frame => self.frame = Some(msg.payload.clone()),
            MsgType::Ctrl if msg.is_ack() => {
                if let Ok(ack) = CtrlAck::from_payload(&msg.payload) {
                    match ack.event {
                        CtrlEvent::Pause if ack.accepted => self.mark(msg.timestamp, MarkKind::Pause, None),
                        CtrlEvent::Stop | CtrlEvent::Estop if ack.accepted => self.stopped = true,
                        _ => {}
                    }
                }
            }
            MsgType::Ctrl => {
                let kind = match wire::ctrl_event(&msg.payload) {
                    Ok(CtrlEvent::MarkEpisodeStart) => MarkKind::EpisodeStart,
                    Ok(CtrlEvent::MarkEpisodeEnd) => MarkKind::EpisodeEnd,
                    Ok(CtrlEvent::MarkFailure) => MarkKind::Failure,
                    _ => return,
                };
                self.mark(msg.timestamp, kind, None);
            }
            _ => {}
        }
    }

    /// Writes one record stamped `now` from the newest messages. Returns
    /// whether a record was written.
    pub fn sample(&mut self, now: u64) -> Result<bool, BusError> {
        let (Some((cmd_ts, cmd)), Some((state_ts, state)), Some(seen)) = (&self.cmd, &self.state, self.cmd_seen_at)
        else {
            return Ok(false);
        };
        if now.saturating_sub(seen) > self.gap_ns {
            if !self.in_gap {
                self.in_gap = true;
                self.stats.gaps += 1;
                let note = format!("no command for {} ms", (now - seen) / 1_000_000);
                warn!("stream gap: {note}");
                self.mark(seen, MarkKind::Gap, Some(note));
            }
            return Ok(false);
        }
        self.in_gap = false;
        let header = self.writer.header();
        let command = CommandVector::unflatten(&header.layout, cmd, *cmd_ts)?;
        let proprio = ProprioState::unflatten(header.proprio_joints, state, *state_ts)?;
        let ts = now.max(self.last_ts + 1);
        let frame = self.frame.take();
        self.writer.append(ts, &command, &proprio, frame.as_deref())?;
        self.last_ts = ts;
        self.stats.records += 1;
        self.stats.frames += frame.is_some() as u64;
        Ok(true)
    }

    pub fn finish(self) -> Result<RecordStats, BusError> {
        let stats = self.stats;
        self.writer.finish()?;
        Ok(stats)
    }
}

#[derive(Debug, Clone)]
pub struct RecordConfig {
    pub record_hz: f64,
    pub gap: Duration,
    pub duration: Option<Duration>,
    /// Finish when an accepted stop or estop is seen.
    pub stop_on_ctrl: bool,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            record_hz: 30.0,
            gap: DEFAULT_GAP,
            duration: None,
            stop_on_ctrl: true,
        }
    }
}

/// Records the bus into `path` until the duration elapses, `stop` is set, or
/// the session stops. The file is always finalized.
pub fn record(
    addr: SocketAddr,
    path: impl AsRef<Path>,
    header: EpisodeHeader,
    cfg: &RecordConfig,
    stop: Arc<AtomicBool>,
) -> Result<RecordStats, BusError> {
    let client = BusClient::connect(
        addr,
        Handshake::new(
            "recorder",
            Some(header.layout.clone()),
            &[MsgType::Cmd, MsgType::State, MsgType::Frame, MsgType::Ctrl],
        ),
    )?;
    let writer = EpisodeWriter::create(path.as_ref(), header)?;
    let mut rec = Recorder::new(writer, cfg.gap);
    let clock = MonotonicClock::new();
    let mut ticker = Ticker::new(clock.now(), cfg.record_hz);
    let started = Instant::now();
    let mut result = Ok(());
    while !stop.load(Ordering::Relaxed) && cfg.duration.is_none_or(|d| started.elapsed() < d) {
        ticker.wait(&clock);
        loop {
            match client.try_recv() {
                Ok(Some(m)) => rec.on_message(&m, wire::now_ns()),
                Ok(None) => break,
                Err(e) => {
                    result = Err(e);
                    break;
                }
            }
        }
        if result.is_err() {
            break;
        }
        if let Err(e) = rec.sample(wire::now_ns()) {
            result = Err(e);
            break;
        }
        if cfg.stop_on_ctrl && rec.stopped() {
            info!("session stopped; finishing recording");
            break;
        }
    }
    let stats = rec.finish()?;
    result.map(|_| stats)
}

/// Republishes the episode's commands with the recorded spacing divided by
/// `speed`, stamped with the current time. Returns the number published.
pub fn replay(addr: SocketAddr, episode: &Episode, speed: f64, stop: &AtomicBool) -> Result<u64, BusError> {
    if !(speed > 0.0 && speed.is_finite()) {
        return Err(BusError::Handshake(format!("replay speed must be positive, got {speed}")));
    }
    let client = BusClient::connect(
        addr,
        Handshake::new("replay", Some(episode.header.layout.clone()), &[]),
    )?;
    let layout = &episode.header.layout;
    let Some(first) = episode.records.first() else { return Ok(0) };
    let clock = MonotonicClock::new();
    let start = clock.now();
    let mut sent = 0;
    for r in &episode.records {
        if stop.load(Ordering::Relaxed) {
            break;
        }
        let offset = Duration::from_nanos(r.timestamp - first.timestamp).div_f64(speed);
        clock.sleep_until(start + offset);
        let flat = r.command.flatten(layout)?;
        client.publish_at(MsgType::Cmd, wire::now_ns(), 0, wire::cmd_payload(&flat))?;
        sent += 1;
    }
    // Give the broker a moment to flush before the connection closes.
    thread::sleep(Duration::from_millis(20));
    Ok(sent)
}
