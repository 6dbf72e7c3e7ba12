use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("no data rows")]
    NoRows,
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("line {line}: time `{value}` is not a positive finite number")]
    NonPositiveTime { line: u64, value: String },
    #[error("line {line}: status `{value}` is not an event indicator")]
    BadStatus { line: u64, value: String },
    #[error("group {0} has no observations")]
    EmptyGroup(String),
    #[error("need at least two groups, found {0}")]
    TooFewGroups(usize),
    #[error("invalid observation: {0}")]
    InvalidObservation(String),
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("effect is inconsistent with the layout: {0}")]
    EffectInconsistentWithLayout(String),
    #[error("invalid weight `{0}`")]
    InvalidWeight(String),
    #[error("weight functions are linearly dependent")]
    DependentWeights,
    #[error("invalid permutation plan: {0}")]
    InvalidPlan(String),
    #[error("exact enumeration needs {count} assignments, cap is {cap}")]
    CapExceeded { count: u128, cap: u128 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("singular limit covariance: {0}")]
    SingularLimit(String),
    #[error("censoring rate {0} cannot be reached")]
    TargetUnreachable(f64),
    #[error("internal numerical error: {0}")]
    Numerical(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
