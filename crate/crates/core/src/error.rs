use thiserror::Error;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("ensemble must contain at least one particle")]
    EmptyEnsemble,

    #[error("position data of length {len} is not a multiple of dimension {dim}")]
    RaggedPositions { len: usize, dim: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("ensembles have different particle counts: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("non-finite coordinate produced for particle {particle} in {context}")]
    NonFinite {
        context: &'static str,
        particle: usize,
    },

    #[error("coordinate blew past the guard at step {step}, particle {particle}")]
    Blowup { step: usize, particle: usize },

    #[error("{what} supports at most n = {limit}, got n = {n}")]
    TooLarge {
        what: &'static str,
        n: usize,
        limit: usize,
    },

    #[error("time {t} does not lie on the path grid (t0 = {t0}, dt = {dt})")]
    OffGrid { t: f64, t0: f64, dt: f64 },

    #[error("path spans [{t0}, {t1}] but [{s}, {t}] was requested")]
    PathTooShort { t0: f64, t1: f64, s: f64, t: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),

    #[error("{0}")]
    Unsupported(&'static str),

    #[error("replica budget {requested} exceeds the configured cap {cap}")]
    BudgetExceeded { requested: usize, cap: usize },
}
