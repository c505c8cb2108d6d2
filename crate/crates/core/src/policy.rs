//! Action-chunk execution and the command history fed back as observation.

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use crate::error::PolicyError;

/// Steps predicted per inference call.
pub const CHUNK_LEN: usize = 64;
/// Steps executed from each chunk before switching to a newer one.
pub const EXECUTE_STEPS: usize = 48;
/// Execution rate, Hz.
pub const EXECUTION_HZ: f64 = 30.0;
/// Inference request rate, Hz.
pub const INFERENCE_HZ: f64 = 20.0;
pub const DEFAULT_HISTORY: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct ActionChunk {
    steps: Vec<Vec<f64>>,
    /// Nanoseconds.
    pub issued_at: u64,
    /// Id of the inference call that produced the chunk.
    pub source_seq: u64,
}

impl ActionChunk {
    pub fn new(steps: Vec<Vec<f64>>, dim: usize, issued_at: u64, source_seq: u64) -> Result<Self, PolicyError> {
        if steps.len() != CHUNK_LEN {
            return Err(PolicyError::ChunkLength {
                expected: CHUNK_LEN,
                got: steps.len(),
            });
        }
        if let Some(bad) = steps.iter().find(|s| s.len() != dim) {
            return Err(PolicyError::StepDimension {
                expected: dim,
                got: bad.len(),
            });
        }
        if steps.iter().flatten().any(|v| !v.is_finite()) {
            return Err(PolicyError::NonFinite);
        }
        Ok(Self {
            steps,
            issued_at,
            source_seq,
        })
    }

    /// Splits a row-major `CHUNK_LEN x dim` array.
    pub fn from_flat(flat: &[f64], dim: usize, issued_at: u64, source_seq: u64) -> Result<Self, PolicyError> {
        if dim == 0 || !flat.len().is_multiple_of(dim) {
            return Err(PolicyError::StepDimension {
                expected: dim,
                got: flat.len(),
            });
        }
        Self::new(flat.chunks(dim).map(<[f64]>::to_vec).collect(), dim, issued_at, source_seq)
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn dim(&self) -> usize {
        self.steps[0].len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.steps.concat()
    }
}

/// Fixed-capacity ring of the most recent commands, oldest first.
#[derive(Debug, Clone)]
pub struct HistoryBuffer {
    capacity: usize,
    ring: VecDeque<Vec<f64>>,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Result<Self, PolicyError> {
        if capacity == 0 {
            return Err(PolicyError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            ring: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.ring.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ring.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.ring.len() == self.capacity
    }

    pub fn push(&mut self, command: Vec<f64>) {
        if self.ring.len() == self.capacity {
            self.ring.pop_front();
        }
        self.ring.push_back(command);
    }

    /// Exactly `capacity` entries, oldest first. A partly filled buffer is
    /// padded at the front with copies of its oldest entry.
    pub fn snapshot(&self) -> Option<Vec<Vec<f64>>> {
        let oldest = self.ring.front()?;
        let pad = self.capacity - self.ring.len();
        Some(
            std::iter::repeat_n(oldest, pad)
                .chain(self.ring.iter())
                .cloned()
                .collect(),
        )
    }

    pub fn flat(&self) -> Option<Vec<f64>> {
        self.snapshot().map(|s| s.concat())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TickSource {
    Chunk { seq: u64, index: usize },
    /// Holding the last emitted command.
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tick {
    pub command: Vec<f64>,
    pub source: TickSource,
    /// A new chunk started on this tick.
    pub switched: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SchedulerStats {
    pub ticks: u64,
    pub switches: u64,
    pub holds: u64,
    pub starvation_events: u64,
    pub fallback_events: u64,
    /// Executed step count of each finished chunk, as a histogram.
    pub executed_per_chunk: BTreeMap<usize, u64>,
}

/// Tick-driven chunk executor.
///
/// Each tick emits the next step of the current chunk. A chunk received via
/// [`offer`](Self::offer) replaces the current one once `EXECUTE_STEPS`
/// steps have run. A late chunk keeps the old one going into its tail; after
/// all `CHUNK_LEN` steps the last command is held and starvation flagged.
#[derive(Debug, Clone, Default)]
pub struct ChunkScheduler {
    current: Option<ActionChunk>,
    index: usize,
    pending: Option<ActionChunk>,
    last: Option<Vec<f64>>,
    starved: bool,
    fallback: bool,
    stats: SchedulerStats,
}

impl ChunkScheduler {
    pub fn new() -> Self {
        Self::default()
    }

    /// Delivers a chunk into the single-slot mailbox; a newer chunk replaces
    /// one that has not started yet.
    pub fn offer(&mut self, chunk: ActionChunk) {
        self.pending = Some(chunk);
    }

    /// Stops executing the current chunk and empties the mailbox; the last
    /// command is held until a new chunk arrives.
    pub fn engage_fallback(&mut self) {
        self.pending = None;
        if !self.fallback {
            self.stats.fallback_events += 1;
        }
        self.fallback = true;
    }

    pub fn is_starved(&self) -> bool {
        self.starved
    }

    pub fn in_fallback(&self) -> bool {
        self.fallback
    }

    pub fn stats(&self) -> &SchedulerStats {
        &self.stats
    }

    pub fn last_command(&self) -> Option<&[f64]> {
        self.last.as_deref()
    }

    fn switch(&mut self) {
        if self.current.take().is_some() && !self.fallback {
            *self.stats.executed_per_chunk.entry(self.index).or_default() += 1;
        }
        self.current = self.pending.take();
        self.index = 0;
        self.starved = false;
        self.fallback = false;
        self.stats.switches += 1;
    }

    /// Advances one tick. `None` until the first chunk arrives.
    pub fn tick(&mut self) -> Option<Tick> {
        let boundary = self.current.is_none() || self.fallback || self.index >= EXECUTE_STEPS;
        let switched = boundary && self.pending.is_some();
        if switched {
            self.switch();
        }
        self.stats.ticks += 1;
        let live = !self.fallback && self.index < CHUNK_LEN;
        match (&self.current, live) {
            (Some(chunk), true) => {
                let command = chunk.steps[self.index].clone();
                let source = TickSource::Chunk {
                    seq: chunk.source_seq,
                    index: self.index,
                };
                self.index += 1;
                self.last = Some(command.clone());
                Some(Tick {
                    command,
                    source,
                    switched,
                })
            }
            _ => {
                let command = self.last.clone()?;
                if !self.fallback && !self.starved {
                    self.starved = true;
                    self.stats.starvation_events += 1;
                }
                self.stats.holds += 1;
                Some(Tick {
                    command,
                    source: TickSource::Hold,
                    switched: false,
                })
            }
        }
    }
}

/// Time source for real-time loops.
pub trait Clock {
    /// Time since the clock's epoch.
    fn now(&self) -> Duration;
    fn sleep_until(&self, deadline: Duration);
}

#[derive(Debug, Clone, Copy)]
pub struct MonotonicClock {
    epoch: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

/// Fixed-rate deadlines anchored at a start time, so jitter does not accumulate.
#[derive(Debug, Clone, Copy)]
pub struct Ticker {
    start: Duration,
    period: Duration,
    k: u64,
}

impl Ticker {
    pub fn new(start: Duration, hz: f64) -> Self {
        Self {
            start,
            period: Duration::from_secs_f64(1.0 / hz),
            k: 0,
        }
    }

    /// Sleeps until the next deadline and returns it. Deadlines already
    /// missed by more than one period are skipped.
    pub fn wait<C: Clock>(&mut self, clock: &C) -> Duration {
        self.k += 1;
        let mut deadline = self.start + self.period.mul_f64(self.k as f64);
        let now = clock.now();
        if now > deadline + self.period {
            self.k = ((now - self.start).as_secs_f64() / self.period.as_secs_f64()).ceil() as u64;
            deadline = self.start + self.period.mul_f64(self.k as f64);
        }
        clock.sleep_until(deadline);
        deadline
    }
}
