use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid phantom geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),
    #[error("malformed prompt at byte {position}: {message}")]
    MalformedPrompt { position: usize, message: String },
    #[error("invalid schedule parameters: {0}")]
    InvalidScheduleParams(String),
    #[error("invalid timestep {t} (schedule has {steps} steps)")]
    InvalidTimestep { t: usize, steps: usize },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("conditioning mismatch: {0}")]
    ConditioningMismatch(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("empty input")]
    EmptyInput,
    #[error("empty mask")]
    EmptyMask,
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("corpus fingerprint mismatch: {0}")]
    CorpusMismatch(String),
}

impl Error {
    pub(crate) fn shape(expected: impl core::fmt::Debug, found: impl core::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            expected: alloc::format!("{expected:?}"),
            found: alloc::format!("{found:?}"),
        }
    }
}
