//! Error types shared across the crate.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A target point is not reachable from the cell it was paired with.
    #[error("point ({x}, {y}) is out of range for cell ({i}, {j}) at stride {stride}")]
    OutOfRange {
        x: f64,
        y: f64,
        i: usize,
        j: usize,
        stride: usize,
    },

    /// More ground-truth points than proposal slots; no injective assignment exists.
    #[error("infeasible assignment: {num_gt} ground-truth points but only {num_slots} slots; raise slots_per_cell or lower the stride")]
    InfeasibleAssignment { num_gt: usize, num_slots: usize },

    /// Signals that a cost matrix cannot be built because there is nothing to match.
    #[error("empty ground truth: no points to match, all slots are negative")]
    EmptyGroundTruth,

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("training diverged: component '{component}' is non-finite ({value})")]
    TrainingDivergence { component: String, value: f64 },

    /// Config validation collects every offending key before failing.
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),

    #[error("dataset integrity: {0}")]
    DatasetIntegrity(String),

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("could not place {requested} blob centers after {attempts} attempts; lower the density or grow the image")]
    PlacementFailure { requested: usize, attempts: usize },

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("output directory {0} is not empty; pass --force to overwrite")]
    OutputCollision(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-parseable category used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::OutOfRange { .. } => "out-of-range",
            Error::InfeasibleAssignment { .. } => "infeasible-assignment",
            Error::EmptyGroundTruth => "empty-ground-truth",
            Error::ContractViolation(_) => "contract-violation",
            Error::TrainingDivergence { .. } => "training-divergence",
            Error::InvalidConfig(_) => "config",
            Error::DatasetIntegrity(_) => "dataset-integrity",
            Error::Parse { .. } => "parse",
            Error::PlacementFailure { .. } => "placement-failure",
            Error::MissingLabels(_) => "missing-labels",
            Error::OutputCollision(_) => "output-collision",
            Error::Io { .. } => "io",
        }
    }

    /// Exit code contract: 2 for usage/config errors, 1 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::OutputCollision(_) => 2,
            _ => 1,
        }
    }
}
