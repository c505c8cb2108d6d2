use thiserror::Error;
use tw2_bus::BusError;
use tw2_core::{CommandError, EpisodeError, ModelError, MotionError, RetargetError, SimError};

/// Process exit codes.
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PROTOCOL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Retarget(#[from] RetargetError),
    #[error(transparent)]
    Command(#[from] CommandError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Episode(#[from] EpisodeError),
    #[error(transparent)]
    Bus(#[from] BusError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Model(_) => EXIT_CONFIG,
            CliError::Bus(e) => bus_exit_code(e),
            _ => EXIT_RUNTIME,
        }
    }
}

pub fn bus_exit_code(e: &BusError) -> i32 {
    match e {
        BusError::Protocol(p) if p.is_protocol() => EXIT_PROTOCOL,
        BusError::Handshake(_) => EXIT_PROTOCOL,
        _ => EXIT_RUNTIME,
    }
}
