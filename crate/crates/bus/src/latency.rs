//! Round-trip latency probe over LATENCY messages.
//!
//! A responder echoes each LATENCY request back with the ACK flag. The round
//! trip is timed on the prober's own monotonic clock, so the result does not
//! depend on clock sync between hosts.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::client::BusClient;
use crate::error::BusError;
use crate::wire::{self, Handshake, MsgType, FLAG_ACK};

pub const ECHO_TIMEOUT: Duration = Duration::from_secs(1);

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub rtt_ns: Vec<u64>,
}

impl LatencyReport {
    pub fn percentile(&self, p: f64) -> u64 {
        percentile(&self.rtt_ns, p)
    }

    pub fn p50_ms(&self) -> f64 {
        self.percentile(50.0) as f64 / 1e6
    }

    pub fn p99_ms(&self) -> f64 {
        self.percentile(99.0) as f64 / 1e6
    }

    pub fn max_ms(&self) -> f64 {
        self.rtt_ns.iter().copied().max().unwrap_or(0) as f64 / 1e6
    }

    /// Half the round trip.
    pub fn one_way_p99_ms(&self) -> f64 {
        self.p99_ms() / 2.0
    }
}

/// Nearest-rank percentile; `p` in [0, 100]. Zero for an empty sample.
pub fn percentile(samples: &[u64], p: f64) -> u64 {
    if samples.is_empty() {
        return 0;
    }
    let mut v = samples.to_vec();
    v.sort_unstable();
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Same as [`percentile`] for floating-point samples.
pub fn percentile_f64(samples: &[f64], p: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Sends `count` probes `interval` apart and waits for each echo.
pub fn measure_latency(client: &BusClient, count: usize, interval: Duration) -> Result<LatencyReport, BusError> {
    let mut rtt = Vec::with_capacity(count);
    let nonce = wire::now_ns();
    for i in 0..count {
        let mut payload = nonce.to_le_bytes().to_vec();
        payload.extend_from_slice(&(i as u64).to_le_bytes());
        let sent = Instant::now();
        client.publish_at(MsgType::Latency, wire::now_ns(), 0, payload.clone())?;
        let deadline = Instant::now() + ECHO_TIMEOUT;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match client.recv_timeout(left)? {
                None => return Err(BusError::Timeout("latency echo")),
                Some(m) if m.kind == MsgType::Latency && m.is_ack() && m.payload == payload => {
                    rtt.push(sent.elapsed().as_nanos() as u64);
                    break;
                }
                Some(_) => {}
            }
        }
        if !interval.is_zero() {
            thread::sleep(interval);
        }
    }
    Ok(LatencyReport { rtt_ns: rtt })
}

/// Echoes every LATENCY request back with the ACK flag.
pub struct EchoResponder {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl EchoResponder {
    pub fn start(addr: SocketAddr) -> Result<Self, BusError> {
        let client = BusClient::connect(addr, Handshake::new("latency-echo", None, &[MsgType::Latency]))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new().name("latency-echo".into()).spawn(move || {
            while !flag.load(Ordering::Relaxed) {
                match client.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(m)) if m.kind == MsgType::Latency && !m.is_ack() => {
                        let _ = client.publish_at(MsgType::Latency, m.timestamp, FLAG_ACK, m.payload);
                    }
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
        })?;
        Ok(Self {
            stop,
            thread: Some(thread),
        })
    }

    pub fn stop(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for EchoResponder {
    fn drop(&mut self) {
        self.halt();
    }
}
