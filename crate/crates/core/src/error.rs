use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {distinct} distinct patches for K = {k}")]
    InsufficientData { distinct: usize, k: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot decode MASK token at position {0}")]
    CannotDecodeMask(usize),

    #[error("data token cannot be MASK")]
    MaskInData,

    #[error("token {token} out of range for K = {k}")]
    TokenOutOfRange { token: usize, k: usize },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("infeasible schedule at t = {t}: {reason}")]
    InfeasibleSchedule { t: usize, reason: String },

    #[error("zero-probability condition: x_t = {x_t} is unreachable from x0 = {x0}")]
    ZeroProbability { x_t: usize, x0: usize },

    #[error("no consistent x0 for x_t = {0}")]
    NoConsistentX0(usize),

    #[error("probability support violation at index {0}")]
    SupportViolation(usize),

    #[error("non-finite loss in {term}: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("condition token {token} outside vocabulary of size {vocab}")]
    ConditionOutOfVocab { token: usize, vocab: usize },

    #[error("model/schedule mismatch: {0}")]
    ModelMismatch(String),

    #[error("noisy grid is inconsistent with every dataset sequence")]
    InconsistentState,

    #[error("format error: {0}")]
    Format(String),

    #[error("unknown config key `{0}`")]
    UnknownConfigKey(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
