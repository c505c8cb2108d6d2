use std::io;

use thiserror::Error;

use crate::session::Mode;
use crate::wire::CtrlEvent;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    Version(u8),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 4 MiB limit")]
    Oversized(usize),
    #[error("truncated message")]
    Truncated,
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl ProtocolError {
    /// True for errors caused by the peer's bytes rather than the transport.
    pub fn is_protocol(&self) -> bool {
        !matches!(self, ProtocolError::Io(_))
    }
}

#[derive(Debug, Error)]
pub enum BusError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("connection closed")]
    Disconnected,
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("handshake rejected: {0}")]
    Handshake(String),
    #[error(transparent)]
    Transition(#[from] TransitionError),
    #[error(transparent)]
    Policy(#[from] tw2_core::PolicyError),
    #[error(transparent)]
    Command(#[from] tw2_core::CommandError),
    #[error(transparent)]
    Episode(#[from] tw2_core::EpisodeError),
}

#[derive(Debug, Clone, Copy, Error, PartialEq, Eq)]
#[error("`{}` is not allowed in mode {from:?}", event.name())]
pub struct TransitionError {
    pub from: Mode,
    pub event: CtrlEvent,
}
