use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed model config: {0}")]
    Parse(String),
    #[error("invalid model: {entity}: {reason}")]
    Invalid { entity: String, reason: String },
    #[error("joint vector has length {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown link `{0}`")]
    UnknownLink(String),
}

#[derive(Debug, Error)]
pub enum RetargetError {
    #[error("required human link `{0}` is missing from the frame")]
    MissingLink(String),
    #[error("warm start has {got} joints, model expects {expected}")]
    WarmStartDimension { expected: usize, got: usize },
    #[error("invalid frame: {0}")]
    InvalidFrame(String),
    #[error("grasp command alpha {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum CommandError {
    #[error("time step must be positive, got {0} s")]
    NonPositiveStep(f64),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("normalization scale for dimension {index} is {value}, must be > 0")]
    NonPositiveScale { index: usize, value: f64 },
    #[error("noise fraction must be >= 0, got {0}")]
    NegativeFraction(f64),
    #[error("no normalization statistics available")]
    MissingStats,
    #[error("cannot compute statistics from an empty set")]
    Empty,
}

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("time step {0} s outside (0, 0.1]")]
    InvalidStep(f64),
    #[error("expected {expected} joint values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("tracking alpha must be > 0, got {0}")]
    InvalidAlpha(f64),
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an episode file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("episode file is truncated or was not finalized (missing footer)")]
    MissingFooter,
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("invalid episode: {0}")]
    Invalid(String),
    #[error(transparent)]
    Command(#[from] CommandError),
}

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("unknown motion kind `{0}` (expected walk, crouch, reach or head-scan)")]
    UnknownKind(String),
    #[error("duration must be positive, got {0} s")]
    InvalidDuration(f64),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed pose file: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("chunk has {got} steps, expected {expected}")]
    ChunkLength { expected: usize, got: usize },
    #[error("chunk step has {got} values, expected {expected}")]
    StepDimension { expected: usize, got: usize },
    #[error("non-finite value in action chunk")]
    NonFinite,
    #[error("history capacity must be > 0")]
    ZeroCapacity,
}
