use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },

    #[error("buffer length {actual} does not match the expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("cannot stack an empty list of matrices")]
    EmptyStack,

    #[error("svd did not converge after {sweeps} sweeps (off-diagonal ratio {off_diagonal:e})")]
    ConvergenceFailure { sweeps: usize, off_diagonal: f64 },

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("least-squares system is rank deficient (condition number {condition:e})")]
    RankDeficient { condition: f64 },

    #[error("group {group_id}: member `{member}` is incompatible with {method}: {reason}")]
    Incompatible {
        group_id: usize,
        member: String,
        method: &'static str,
        reason: String,
    },

    #[error("group {group_id} has no members")]
    EmptyGroup { group_id: usize },

    #[error("duplicate name `{0}`")]
    DuplicateName(String),

    #[error("iteration count must be at least 1")]
    ZeroIterations,

    #[error("index {index} out of range for {len} members")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("input has {actual} channels but the kernel expects {expected}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("factor chain mismatch: {0}")]
    ChainMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("layer `{0}` appears in more than one group")]
    OverlappingGroups(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("target compression factor {target} is infeasible (rank-1 plan reaches {max})")]
    InfeasibleTarget { target: f64, max: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: parse error at line {line}, column {column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{path}: expected {expected} bytes, found {actual}")]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unknown dtype `{0}` (expected f32 or f64)")]
    UnknownDtype(String),

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("output {0} already exists (pass force to overwrite)")]
    OutputExists(PathBuf),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
