//! INFER_REQUEST / INFER_RESPONSE payloads, the requesting side and a test
//! policy server.
//!
//! Request payload: `u32 dim, u32 history_len, u32 image_len, image bytes,
//! history f64s (history_len x dim, oldest first)`. Response payload: `u32
//! steps, u32 dim, f64s (steps x dim)`. A response carries the sequence number
//! of the request it answers. Values are in normalized command units.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tw2_core::policy::{ActionChunk, CHUNK_LEN};

use crate::client::BusClient;
use crate::error::{BusError, ProtocolError};
use crate::wire::{self, Handshake, MsgType, FLAG_ERROR};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(200);

fn u32_at(p: &[u8], at: usize) -> Result<u32, ProtocolError> {
    p.get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(ProtocolError::Truncated)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferRequest {
    pub dim: usize,
    pub image: Vec<u8>,
    /// `history_len x dim`, oldest first.
    pub history: Vec<Vec<f64>>,
}

impl InferRequest {
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.image.len() + self.history.len() * self.dim * 8);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.history.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.image.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.image);
        for row in &self.history {
            out.extend_from_slice(&wire::f64s_to_bytes(row));
        }
        out
    }

    pub fn from_payload(p: &[u8]) -> Result<Self, ProtocolError> {
        let dim = u32_at(p, 0)? as usize;
        let rows = u32_at(p, 4)? as usize;
        let image_len = u32_at(p, 8)? as usize;
        let image = p.get(12..12 + image_len).ok_or(ProtocolError::Truncated)?.to_vec();
        let values = wire::bytes_to_f64s(&p[12 + image_len..])?;
        if dim == 0 || values.len() != rows * dim {
            return Err(ProtocolError::Payload(format!(
                "history of {} values, expected {rows} x {dim}",
                values.len()
            )));
        }
        Ok(Self {
            dim,
            image,
            history: values.chunks(dim).map(<[f64]>::to_vec).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResponse {
    pub dim: usize,
    pub steps: Vec<Vec<f64>>,
}

impl InferResponse {
    pub fn to_payload(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.steps.len() * self.dim * 8);
        out.extend_from_slice(&(self.steps.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for row in &self.steps {
            out.extend_from_slice(&wire::f64s_to_bytes(row));
        }
        out
    }

    pub fn from_payload(p: &[u8]) -> Result<Self, ProtocolError> {
        let steps = u32_at(p, 0)? as usize;
        let dim = u32_at(p, 4)? as usize;
        let values = wire::bytes_to_f64s(&p[8..])?;
        if dim == 0 || values.len() != steps * dim {
            return Err(ProtocolError::Payload(format!(
                "response of {} values, expected {steps} x {dim}",
                values.len()
            )));
        }
        Ok(Self {
            dim,
            steps: values.chunks(dim).map(<[f64]>::to_vec).collect(),
        })
    }
}

/// Issues inference requests and waits for the matching response.
pub struct PolicyClient {
    client: BusClient,
    timeout: Duration,
}

impl PolicyClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, BusError> {
        let client = BusClient::connect(
            addr,
            Handshake::new("policy-client", None, &[MsgType::InferResponse, MsgType::Frame]),
        )?;
        Ok(Self { client, timeout })
    }

    /// Sends `req` and returns the chunk, still in normalized units. Responses
    /// to earlier requests are discarded. Fails on timeout, an ERROR reply, or
    /// a chunk that is not `CHUNK_LEN x dim`.
    pub fn infer(&self, req: &InferRequest) -> Result<ActionChunk, BusError> {
        let issued = wire::now_ns();
        let seq = self.client.publish_at(MsgType::InferRequest, issued, 0, req.to_payload())?;
        let deadline = Instant::now() + self.timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let msg = match self.client.recv_timeout(left)? {
                Some(m) => m,
                None => return Err(BusError::Timeout("inference response")),
            };
            if msg.kind != MsgType::InferResponse || msg.seq != seq {
                continue;
            }
            if msg.is_error() {
                return Err(ProtocolError::Payload(String::from_utf8_lossy(&msg.payload).into_owned()).into());
            }
            let resp = InferResponse::from_payload(&msg.payload)?;
            if resp.dim != req.dim {
                return Err(tw2_core::PolicyError::StepDimension {
                    expected: req.dim,
                    got: resp.dim,
                }
                .into());
            }
            return Ok(ActionChunk::new(resp.steps, req.dim, issued, seq as u64)?);
        }
    }

    /// Newest FRAME payload received since the last call, if any.
    pub fn latest_frame(&self) -> Option<Vec<u8>> {
        let mut latest = None;
        while let Ok(Some(m)) = self.client.try_recv() {
            if m.kind == MsgType::Frame {
                latest = Some(m.payload);
            }
        }
        latest
    }
}

#[derive(Debug, Clone)]
pub struct EchoPolicyConfig {
    /// Delay before answering.
    pub latency: Duration,
    /// Steps per chunk; anything but `CHUNK_LEN` makes a malformed reply.
    pub steps: usize,
    /// Added to the newest history entry per step, so chunks are distinguishable.
    pub drift: f64,
    /// Stop answering after this many requests.
    pub answer_limit: Option<u64>,
}

impl Default for EchoPolicyConfig {
    fn default() -> Self {
        Self {
            latency: Duration::from_millis(5),
            steps: CHUNK_LEN,
            drift: 0.0,
            answer_limit: None,
        }
    }
}

/// The chunk an echo policy returns for `req`: step `i` is the newest
/// history entry plus `(i + 1) * drift` in every dimension.
pub fn echo_chunk(req: &InferRequest, steps: usize, drift: f64) -> InferResponse {
    let newest = req.history.last().cloned().unwrap_or_else(|| vec![0.0; req.dim]);
    InferResponse {
        dim: req.dim,
        steps: (0..steps)
            .map(|i| newest.iter().map(|v| v + (i + 1) as f64 * drift).collect())
            .collect(),
    }
}

/// Stand-in policy server answering on the bus.
pub struct EchoPolicyServer {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<u64>>,
}

impl EchoPolicyServer {
    pub fn start(addr: SocketAddr, cfg: EchoPolicyConfig) -> Result<Self, BusError> {
        let client = BusClient::connect(addr, Handshake::new("echo-policy", None, &[MsgType::InferRequest]))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new().name("echo-policy".into()).spawn(move || {
            let mut answered = 0u64;
            while !flag.load(Ordering::Relaxed) {
                let msg = match client.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(m)) if m.kind == MsgType::InferRequest => m,
                    Ok(_) => continue,
                    Err(_) => break,
                };
                if cfg.answer_limit.is_some_and(|n| answered >= n) {
                    continue;
                }
                if !cfg.latency.is_zero() {
                    thread::sleep(cfg.latency);
                }
                let sent = match InferRequest::from_payload(&msg.payload) {
                    Ok(req) => {
                        let payload = echo_chunk(&req, cfg.steps, cfg.drift).to_payload();
                        send_reply(&client, msg.seq, 0, payload)
                    }
                    Err(e) => send_reply(&client, msg.seq, FLAG_ERROR, e.to_string().into_bytes()),
                };
                if sent.is_err() {
                    break;
                }
                answered += 1;
            }
            answered
        })?;
        Ok(Self {
            stop,
            thread: Some(thread),
        })
    }

    /// Stops the server and returns the number of requests answered.
    pub fn stop(mut self) -> u64 {
        self.halt()
    }

    fn halt(&mut self) -> u64 {
        self.stop.store(true, Ordering::Relaxed);
        self.thread.take().and_then(|t| t.join().ok()).unwrap_or(0)
    }
}

impl Drop for EchoPolicyServer {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Replies reuse the request's sequence number, bypassing the client's own
/// counter.
fn send_reply(client: &BusClient, seq: u32, flags: u8, payload: Vec<u8>) -> Result<(), BusError> {
    let bytes = wire::Message::new(MsgType::InferResponse, seq, wire::now_ns(), payload)
        .with_flags(flags)
        .encode()?;
    client.sender().send_raw(&bytes)
}
