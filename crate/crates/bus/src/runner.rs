//! Policy runner: inference at one rate, chunk execution at another.
//!
//! A requester thread sends the normalized command history (plus the newest
//! camera frame) at the inference rate and posts each answer into a mailbox.
//! The execution loop ticks at the execution rate, feeds the mailbox into a
//! [`ChunkScheduler`], publishes the emitted command as CMD and appends it to
//! the history. Any inference failure puts the scheduler on hold at the next
//! tick.

use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, warn};
use tw2_core::policy::{
    ActionChunk, ChunkScheduler, Clock, HistoryBuffer, MonotonicClock, SchedulerStats, Tick, Ticker, DEFAULT_HISTORY,
    EXECUTION_HZ, INFERENCE_HZ,
};
use tw2_core::{CommandLayout, NormalizationStats};

use crate::client::BusClient;
use crate::error::BusError;
use crate::inference::{InferRequest, PolicyClient, DEFAULT_TIMEOUT};
use crate::latency::percentile_f64;
use crate::wire::{self, Handshake, MsgType};

#[derive(Debug, Clone)]
pub struct RunnerConfig {
    pub exec_hz: f64,
    pub infer_hz: f64,
    pub history_len: usize,
    pub timeout: Duration,
    /// `None` runs until the stop flag is set.
    pub duration: Option<Duration>,
    pub normalization: Option<NormalizationStats>,
    /// Seeds the history before the first command is emitted.
    pub initial: Vec<f64>,
    /// Keep every tick and chunk in the report.
    pub keep_log: bool,
}

impl RunnerConfig {
    pub fn new(initial: Vec<f64>) -> Self {
        Self {
            exec_hz: EXECUTION_HZ,
            infer_hz: INFERENCE_HZ,
            history_len: DEFAULT_HISTORY,
            timeout: DEFAULT_TIMEOUT,
            duration: None,
            normalization: None,
            initial,
            keep_log: false,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    /// Commands emitted.
    pub ticks: u64,
    /// Time between the first and the last emitted tick.
    pub elapsed: Duration,
    pub rate_hz: f64,
    pub scheduler: SchedulerStats,
    pub requests: u64,
    pub failures: u64,
    pub inference_p99_ms: f64,
    /// Emitted ticks, when `keep_log` is set.
    pub log: Vec<Tick>,
    /// Chunks delivered to the scheduler (denormalized), when `keep_log` is set.
    pub chunks: Vec<ActionChunk>,
}

enum Event {
    Chunk(ActionChunk),
    Failure(String),
}

#[derive(Default)]
struct Mailbox {
    queue: Mutex<VecDeque<Event>>,
}

impl Mailbox {
    fn post(&self, e: Event) {
        let mut q = self.queue.lock().unwrap();
        // Only the newest chunk matters; failures are kept in order.
        if matches!(e, Event::Chunk(_)) {
            q.retain(|x| !matches!(x, Event::Chunk(_)));
        }
        q.push_back(e);
    }

    fn drain(&self) -> Vec<Event> {
        self.queue.lock().unwrap().drain(..).collect()
    }
}

fn denormalize(chunk: ActionChunk, stats: Option<&NormalizationStats>) -> Result<ActionChunk, BusError> {
    let Some(stats) = stats else { return Ok(chunk) };
    let steps = chunk
        .steps()
        .iter()
        .map(|s| stats.denormalize(s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ActionChunk::new(steps, chunk.dim(), chunk.issued_at, chunk.source_seq)?)
}

/// Runs until `cfg.duration` elapses or `stop` is set.
pub fn run_policy(
    addr: SocketAddr,
    layout: &CommandLayout,
    cfg: RunnerConfig,
    stop: Arc<AtomicBool>,
) -> Result<RunReport, BusError> {
    let dim = layout.dim();
    if cfg.initial.len() != dim {
        return Err(tw2_core::PolicyError::StepDimension {
            expected: dim,
            got: cfg.initial.len(),
        }
        .into());
    }
    let normalize = |v: &[f64]| -> Result<Vec<f64>, BusError> {
        Ok(match &cfg.normalization {
            Some(s) => s.normalize(v)?,
            None => v.to_vec(),
        })
    };
    let mut history = HistoryBuffer::new(cfg.history_len)?;
    history.push(normalize(&cfg.initial)?);
    let history = Arc::new(Mutex::new(history));
    let mailbox = Arc::new(Mailbox::default());
    let requests = Arc::new(AtomicU64::new(0));
    let failures = Arc::new(AtomicU64::new(0));
    let done = Arc::new(AtomicBool::new(false));

    let policy = PolicyClient::connect(addr, cfg.timeout)?;
    let publisher = BusClient::connect(addr, Handshake::new("policy-runner", Some(layout.clone()), &[]))?;

    let requester = {
        let (history, mailbox, requests, failures, done, stop) = (
            history.clone(),
            mailbox.clone(),
            requests.clone(),
            failures.clone(),
            done.clone(),
            stop.clone(),
        );
        let stats = cfg.normalization.clone();
        let infer_hz = cfg.infer_hz;
        thread::Builder::new().name("policy-requester".into()).spawn(move || {
            let clock = MonotonicClock::new();
            let mut ticker = Ticker::new(clock.now(), infer_hz);
            let mut latencies = Vec::new();
            let mut image = Vec::new();
            while !done.load(Ordering::Relaxed) && !stop.load(Ordering::Relaxed) {
                if let Some(f) = policy.latest_frame() {
                    image = f;
                }
                let snapshot = history.lock().unwrap().snapshot().expect("history is seeded");
                let req = InferRequest {
                    dim,
                    image: image.clone(),
                    history: snapshot,
                };
                requests.fetch_add(1, Ordering::Relaxed);
                let t0 = Instant::now();
                match policy.infer(&req).and_then(|c| denormalize(c, stats.as_ref())) {
                    Ok(chunk) => {
                        latencies.push(t0.elapsed().as_secs_f64() * 1e3);
                        mailbox.post(Event::Chunk(chunk));
                    }
                    Err(e) => {
                        failures.fetch_add(1, Ordering::Relaxed);
                        debug!("inference failed: {e}");
                        mailbox.post(Event::Failure(e.to_string()));
                    }
                }
                ticker.wait(&clock);
            }
            latencies
        })?
    };

    let clock = MonotonicClock::new();
    let mut ticker = Ticker::new(clock.now(), cfg.exec_hz);
    let mut sched = ChunkScheduler::new();
    let mut report = RunReport::default();
    let mut first: Option<Instant> = None;
    let mut last = Instant::now();
    let mut result = Ok(());
    let started = Instant::now();
    while !stop.load(Ordering::Relaxed) && cfg.duration.is_none_or(|d| started.elapsed() < d) {
        ticker.wait(&clock);
        for e in mailbox.drain() {
            match e {
                Event::Chunk(c) => {
                    if cfg.keep_log {
                        report.chunks.push(c.clone());
                    }
                    sched.offer(c);
                }
                Event::Failure(why) => {
                    if !sched.in_fallback() {
                        warn!("inference failure, holding: {why}");
                    }
                    sched.engage_fallback();
                }
            }
        }
        let Some(tick) = sched.tick() else { continue };
        report.ticks += 1;
        let now = Instant::now();
        first.get_or_insert(now);
        last = now;
        if let Err(e) = publisher.publish_at(MsgType::Cmd, wire::now_ns(), 0, wire::cmd_payload(&tick.command)) {
            result = Err(e);
            break;
        }
        match normalize(&tick.command) {
            Ok(n) => history.lock().unwrap().push(n),
            Err(e) => {
                result = Err(e);
                break;
            }
        }
        if cfg.keep_log {
            report.log.push(tick);
        }
    }
    done.store(true, Ordering::Relaxed);
    let latencies = requester.join().unwrap_or_default();
    result?;

    report.scheduler = sched.stats().clone();
    report.elapsed = first.map(|f| last - f).unwrap_or_default();
    if report.ticks > 1 && !report.elapsed.is_zero() {
        report.rate_hz = (report.ticks - 1) as f64 / report.elapsed.as_secs_f64();
    }
    report.requests = requests.load(Ordering::Relaxed);
    report.failures = failures.load(Ordering::Relaxed);
    report.inference_p99_ms = percentile_f64(&latencies, 99.0);
    Ok(report)
}
