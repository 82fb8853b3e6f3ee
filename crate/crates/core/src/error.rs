use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the disaggregation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    // ingestion
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("non-monotonic time at {at}: {reason}")]
    NonMonotonicTime { at: String, reason: String },
    #[error("negative load {value} at {at}")]
    NegativeLoad { at: String, value: f64 },
    #[error("day {date} is incomplete: {have} of {need} usable samples")]
    IncompleteDay {
        date: String,
        have: usize,
        need: usize,
    },
    #[error("day {date} has zero total energy")]
    ZeroEnergyDay { date: String },
    #[error("period mismatch: {0}")]
    PeriodMismatch(String),
    #[error("zero total: {0}")]
    ZeroTotal(String),

    // constraints
    #[error("month {0} has no days")]
    EmptyMonth(String),
    #[error("sector mapping is not surjective: sector {0} receives no source")]
    NotSurjective(usize),
    #[error("source {0} is assigned to more than one sector")]
    MultiAssignment(usize),
    #[error("source {source_index} is not assigned to any sector")]
    UnassignedSource { source_index: usize },
    #[error("indicator column for sector {0} sums to zero")]
    ZeroIndicatorColumn(String),
    #[error("missing indicator for sector {sector} in month {month}")]
    MissingMonth { sector: String, month: String },
    #[error("proportional fitting of Y did not converge after {iters} sweeps (residual {residual:.3e})")]
    ScalingNotConverged { iters: usize, residual: f64 },

    // numerics
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite entry produced in {0}")]
    NonFiniteEntry(&'static str),
    #[error("solver diverged at iteration {iter}: loss = {loss}")]
    Diverged { iter: usize, loss: f64 },
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("fixed sources are rank deficient (condition number {0:.3e})")]
    RankDeficientSources(f64),
    #[error("no solution retained by clustering")]
    EmptyCluster,
    #[error("at least 3 months are needed for a correlation, got {0}")]
    InsufficientMonths(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // configuration and IO
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Coarse classification used to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            Config(_) | InvalidSpec(_) | NotSurjective(_) | MultiAssignment(_)
            | UnassignedSource { .. } => ErrorKind::Config,
            DimensionMismatch(_)
            | NonFiniteEntry(_)
            | Diverged { .. }
            | DegenerateData(_)
            | RankDeficientSources(_)
            | EmptyCluster
            | ScalingNotConverged { .. } => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
