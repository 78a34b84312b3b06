use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileMissing(PathBuf),
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image data: {0}")]
    CorruptData(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("parameter out of range: {0}")]
    ParamOutOfRange(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("too many tasks: {0} (at most 4)")]
    TooManyTasks(usize),
    #[error("unknown task: {0}")]
    UnknownTask(String),

    #[error("duplicate tool id: {0}")]
    DuplicateId(String),
    #[error("registry is frozen")]
    FrozenRegistry,
    #[error("registry is not frozen")]
    UnfrozenRegistry,
    #[error("unknown tool: {0}")]
    UnknownTool(String),
    #[error("task {0} has no registered tool")]
    TaskWithoutTool(String),
    #[error("external tool failure: {0}")]
    ExternalToolFailure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image too small: {0}")]
    ImageTooSmall(String),
    #[error("population too small: need at least 2, got {0}")]
    PopulationTooSmall(usize),
    #[error("inconsistent metric sets: {0}")]
    InconsistentMetricSets(String),
    #[error("external metric failure: {0}")]
    ExternalMetricFailure(String),

    #[error("empty tool pools")]
    EmptyPools,
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("decision not in space: {0}")]
    DecisionNotInSpace(String),
    #[error("decision space is empty")]
    EmptySpace,

    #[error("banned step: {0}")]
    BannedStep(String),
    #[error("task already executed: {0}")]
    RepeatedTask(String),
    #[error("step budget exhausted")]
    BudgetExhausted,
    #[error("nothing to roll back")]
    NothingToRollback,
    #[error("policy protocol violation: {0}")]
    PolicyProtocol(String),
    #[error("external policy failure: {0}")]
    ExternalPolicyFailure(String),
    #[error("reference image required by policy {0}")]
    ReferenceRequired(String),

    #[error("empty pipeline")]
    EmptyPipeline,
    #[error("parse error at byte {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable kind, used in CLI error objects.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::FileMissing(_) => "file-missing",
            Error::UnsupportedFormat(_) => "unsupported-format",
            Error::CorruptData(_) => "corrupt-data",
            Error::Io(_) => "io-failure",
            Error::InvalidImage(_) => "invalid-image",
            Error::ParamOutOfRange(_) => "param-out-of-range",
            Error::InvalidRecipe(_) => "invalid-recipe",
            Error::TooManyTasks(_) => "too-many-tasks",
            Error::UnknownTask(_) => "unknown-task",
            Error::DuplicateId(_) => "duplicate-id",
            Error::FrozenRegistry => "frozen-registry",
            Error::UnfrozenRegistry => "unfrozen-registry",
            Error::UnknownTool(_) => "unknown-tool",
            Error::TaskWithoutTool(_) => "task-without-tool",
            Error::ExternalToolFailure(_) => "external-tool-failure",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::ImageTooSmall(_) => "image-too-small",
            Error::PopulationTooSmall(_) => "population-too-small",
            Error::InconsistentMetricSets(_) => "inconsistent-metric-sets",
            Error::ExternalMetricFailure(_) => "external-metric-failure",
            Error::EmptyPools => "empty-pools",
            Error::InvalidDecision(_) => "invalid-decision",
            Error::DecisionNotInSpace(_) => "decision-not-in-space",
            Error::EmptySpace => "empty-space",
            Error::BannedStep(_) => "banned-step",
            Error::RepeatedTask(_) => "repeated-task",
            Error::BudgetExhausted => "budget-exhausted",
            Error::NothingToRollback => "nothing-to-rollback",
            Error::PolicyProtocol(_) => "policy-protocol-violation",
            Error::ExternalPolicyFailure(_) => "external-policy-failure",
            Error::ReferenceRequired(_) => "reference-required",
            Error::EmptyPipeline => "empty-pipeline",
            Error::Parse { .. } => "parse-error",
            Error::Config(_) => "invalid-config",
            Error::Json(_) => "json-error",
        }
    }
}
