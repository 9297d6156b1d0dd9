use thiserror::Error;

use crate::numerics::NumericsError;
use crate::synth::SynthError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside 1..={max}")]
    Timestep { t: usize, max: usize },
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("trajectory was recorded with a different schedule ({recorded} vs {given})")]
    ScheduleMismatch { recorded: String, given: String },
    #[error("conditioning: {0}")]
    Conditioning(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("{0}")]
    Degenerate(String),
    #[error("config: {0}")]
    Config(String),
    #[error("cannot access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint at byte {offset}: {msg}")]
    Checkpoint { offset: u64, msg: String },
    #[error("image: {0}")]
    Image(String),
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// Short machine-readable category used in command-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Image(_) => "image",
            Error::Architecture(_) | Error::ScheduleMismatch { .. } => "mismatch",
            Error::Synth(_) | Error::InvalidArgument(_) | Error::Conditioning(_) | Error::Timestep { .. } => "input",
            _ => "runtime",
        }
    }
}
