//! Binary framing shared by the bus and the inference endpoint.
//!
//! Every message is a 24-byte little-endian header followed by the payload:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `TW2B`                   |
//! | 4      | 1    | protocol version (1)           |
//! | 5      | 1    | message type                   |
//! | 6      | 1    | flags (bit 0 ack, bit 1 error) |
//! | 7      | 1    | reserved, zero                 |
//! | 8      | 4    | seq, u32                       |
//! | 12     | 8    | timestamp, u64 ns              |
//! | 20     | 4    | payload length, u32            |

use std::io::{self, Read, Write};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tw2_core::CommandLayout;

use crate::error::ProtocolError;

pub const MAGIC: [u8; 4] = *b"TW2B";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const MAX_PAYLOAD: usize = 4 * 1024 * 1024;

pub const FLAG_ACK: u8 = 0b01;
pub const FLAG_ERROR: u8 = 0b10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum MsgType {
    Pose = 1,
    Cmd = 2,
    State = 3,
    Frame = 4,
    Ctrl = 5,
    Handshake = 6,
    Latency = 7,
    InferRequest = 8,
    InferResponse = 9,
}

impl MsgType {
    pub const TOPICS: [MsgType; 6] = [
        MsgType::Pose,
        MsgType::Cmd,
        MsgType::State,
        MsgType::Frame,
        MsgType::Ctrl,
        MsgType::Latency,
    ];

    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Pose,
            2 => Self::Cmd,
            3 => Self::State,
            4 => Self::Frame,
            5 => Self::Ctrl,
            6 => Self::Handshake,
            7 => Self::Latency,
            8 => Self::InferRequest,
            9 => Self::InferResponse,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MsgType,
    pub flags: u8,
    pub seq: u32,
    /// Nanoseconds since the Unix epoch.
    pub timestamp: u64,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: MsgType, seq: u32, timestamp: u64, payload: Vec<u8>) -> Self {
        Self {
            kind,
            flags: 0,
            seq,
            timestamp,
            payload,
        }
    }

    pub fn with_flags(mut self, flags: u8) -> Self {
        self.flags = flags;
        self
    }

    pub fn is_ack(&self) -> bool {
        self.flags & FLAG_ACK != 0
    }

    pub fn is_error(&self) -> bool {
        self.flags & FLAG_ERROR != 0
    }

    pub fn encode_header(&self) -> Result<[u8; HEADER_LEN], ProtocolError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(ProtocolError::Oversized(self.payload.len()));
        }
        let mut h = [0u8; HEADER_LEN];
        h[0..4].copy_from_slice(&MAGIC);
        h[4] = PROTOCOL_VERSION;
        h[5] = self.kind as u8;
        h[6] = self.flags;
        h[8..12].copy_from_slice(&self.seq.to_le_bytes());
        h[12..20].copy_from_slice(&self.timestamp.to_le_bytes());
        h[20..24].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        Ok(h)
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(&self.encode_header()?);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }
}

/// Header fields after validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub kind: MsgType,
    pub flags: u8,
    pub seq: u32,
    pub timestamp: u64,
    pub len: usize,
}

pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<Header, ProtocolError> {
    if h[0..4] != MAGIC {
        return Err(ProtocolError::BadMagic);
    }
    if h[4] != PROTOCOL_VERSION {
        return Err(ProtocolError::Version(h[4]));
    }
    let kind = MsgType::from_u8(h[5]).ok_or(ProtocolError::UnknownType(h[5]))?;
    let len = u32::from_le_bytes(h[20..24].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversized(len));
    }
    Ok(Header {
        kind,
        flags: h[6],
        seq: u32::from_le_bytes(h[8..12].try_into().unwrap()),
        timestamp: u64::from_le_bytes(h[12..20].try_into().unwrap()),
        len,
    })
}

pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    let head: &[u8; HEADER_LEN] = bytes
        .get(..HEADER_LEN)
        .and_then(|b| b.try_into().ok())
        .ok_or(ProtocolError::Truncated)?;
    let h = decode_header(head)?;
    let payload = bytes.get(HEADER_LEN..HEADER_LEN + h.len).ok_or(ProtocolError::Truncated)?;
    Ok(Message {
        kind: h.kind,
        flags: h.flags,
        seq: h.seq,
        timestamp: h.timestamp,
        payload: payload.to_vec(),
    })
}

/// Reads one message. A clean end of stream before the header yields
/// `Ok(None)`.
pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, ProtocolError> {
    let mut head = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = decode_header(&head)?;
    let mut payload = vec![0u8; h.len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
        _ => ProtocolError::Io(e),
    })?;
    Ok(Some(Message {
        kind: h.kind,
        flags: h.flags,
        seq: h.seq,
        timestamp: h.timestamp,
        payload,
    }))
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), ProtocolError> {
    w.write_all(&msg.encode_header()?)?;
    w.write_all(&msg.payload)?;
    Ok(())
}

pub fn now_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamRates {
    pub pose_hz: f64,
    pub cmd_hz: f64,
    pub state_hz: f64,
}

impl Default for StreamRates {
    fn default() -> Self {
        Self {
            pose_hz: 100.0,
            cmd_hz: 50.0,
            state_hz: 50.0,
        }
    }
}

/// HANDSHAKE payload, UTF-8 JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Handshake {
    pub version: u8,
    #[serde(default)]
    pub layout: Option<CommandLayout>,
    #[serde(default)]
    pub rates: StreamRates,
    #[serde(default)]
    pub subscribe: Vec<MsgType>,
    /// Free-form client name for logs.
    #[serde(default)]
    pub name: String,
}

impl Handshake {
    pub fn new(name: &str, layout: Option<CommandLayout>, subscribe: &[MsgType]) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            layout,
            rates: StreamRates::default(),
            subscribe: subscribe.to_vec(),
            name: name.to_string(),
        }
    }

    pub fn to_payload(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("handshake serializes")
    }

    pub fn from_payload(bytes: &[u8]) -> Result<Self, ProtocolError> {
        serde_json::from_slice(bytes).map_err(|e| ProtocolError::Payload(format!("handshake: {e}")))
    }
}

/// CTRL event codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum CtrlEvent {
    Start = 1,
    Pause = 2,
    Resume = 3,
    Stop = 4,
    Estop = 5,
    MarkEpisodeStart = 16,
    MarkEpisodeEnd = 17,
    MarkFailure = 18,
}

impl CtrlEvent {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Start,
            2 => Self::Pause,
            3 => Self::Resume,
            4 => Self::Stop,
            5 => Self::Estop,
            16 => Self::MarkEpisodeStart,
            17 => Self::MarkEpisodeEnd,
            18 => Self::MarkFailure,
            _ => return None,
        })
    }

    pub fn is_mark(self) -> bool {
        matches!(self, Self::MarkEpisodeStart | Self::MarkEpisodeEnd | Self::MarkFailure)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Start => "start",
            Self::Pause => "pause",
            Self::Resume => "resume",
            Self::Stop => "stop",
            Self::Estop => "estop",
            Self::MarkEpisodeStart => "mark_episode_start",
            Self::MarkEpisodeEnd => "mark_episode_end",
            Self::MarkFailure => "mark_failure",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            Self::Start,
            Self::Pause,
            Self::Resume,
            Self::Stop,
            Self::Estop,
            Self::MarkEpisodeStart,
            Self::MarkEpisodeEnd,
            Self::MarkFailure,
        ]
        .into_iter()
        .find(|e| e.name() == s)
    }
}

/// Payload of an acknowledged CTRL message: `[event, mode, accepted]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CtrlAck {
    pub event: CtrlEvent,
    pub mode: u8,
    pub accepted: bool,
}

impl CtrlAck {
    pub fn to_payload(self) -> Vec<u8> {
        vec![self.event as u8, self.mode, self.accepted as u8]
    }

    pub fn from_payload(p: &[u8]) -> Result<Self, ProtocolError> {
        match p {
            [e, m, a] => Ok(Self {
                event: CtrlEvent::from_u8(*e).ok_or_else(|| ProtocolError::Payload(format!("ctrl event {e}")))?,
                mode: *m,
                accepted: *a != 0,
            }),
            _ => Err(ProtocolError::Payload(format!("ctrl ack of {} bytes", p.len()))),
        }
    }
}

pub fn ctrl_event(p: &[u8]) -> Result<CtrlEvent, ProtocolError> {
    match p {
        [e] => CtrlEvent::from_u8(*e).ok_or_else(|| ProtocolError::Payload(format!("ctrl event {e}"))),
        _ => Err(ProtocolError::Payload(format!("ctrl request of {} bytes", p.len()))),
    }
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 8);
    values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>, ProtocolError> {
    if !bytes.len().is_multiple_of(8) {
        return Err(ProtocolError::Payload(format!("{} bytes is not a f64 array", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// CMD payload: the flattened command, length checked against `layout`.
pub fn cmd_payload(flat: &[f64]) -> Vec<u8> {
    f64s_to_bytes(flat)
}

pub fn parse_cmd(payload: &[u8], layout: &CommandLayout) -> Result<Vec<f64>, ProtocolError> {
    let flat = bytes_to_f64s(payload)?;
    if flat.len() != layout.dim() {
        return Err(ProtocolError::Payload(format!(
            "command of {} values, layout has {}",
            flat.len(),
            layout.dim()
        )));
    }
    Ok(flat)
}

/// STATE payload: timestamp of the command that produced the state, then the
/// flattened proprioceptive state.
pub fn state_payload(cmd_ts: u64, proprio: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + proprio.len() * 8);
    out.extend_from_slice(&cmd_ts.to_le_bytes());
    out.extend_from_slice(&f64s_to_bytes(proprio));
    out
}

pub fn parse_state(payload: &[u8]) -> Result<(u64, Vec<f64>), ProtocolError> {
    if payload.len() < 8 {
        return Err(ProtocolError::Payload("state payload too short".into()));
    }
    let ts = u64::from_le_bytes(payload[..8].try_into().unwrap());
    Ok((ts, bytes_to_f64s(&payload[8..])?))
}
