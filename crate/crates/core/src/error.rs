use thiserror::Error;

/// Errors produced by the simulation and estimation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DpdError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid signal: {0}")]
    InvalidSignal(String),

    #[error("signal has zero power")]
    ZeroSignal,

    #[error("invalid cutoff {cutoff_hz} Hz for sample rate {sample_rate_hz} Hz")]
    InvalidCutoff { cutoff_hz: f64, sample_rate_hz: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("signal of {len} samples is too short (need more than {required})")]
    SignalTooShort { len: usize, required: usize },

    #[error("parameter set does not match model structure: {0}")]
    StructureMismatch(String),

    #[error("singular system: {deficient} of {columns} columns are linearly dependent")]
    SingularSystem { deficient: usize, columns: usize },

    #[error("under-determined system: {rows} rows for {columns} unknowns")]
    Underdetermined { rows: usize, columns: usize },

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for DpdError {
    fn from(e: std::io::Error) -> Self {
        DpdError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, DpdError>;
