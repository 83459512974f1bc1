use thiserror::Error;

/// Errors produced across the toolkit, tagged with enough context to
/// attribute failures to a pipeline step.
#[derive(Debug, Error)]
pub enum CalmError {
    #[error("data error: {0}")]
    Data(String),
    #[error("unknown variable '{0}'")]
    UnknownVariable(String),
    #[error("insufficient rows: need {need}, have {have}")]
    InsufficientRows { need: usize, have: usize },
    #[error("insufficient independent pairs: required {required}, found {found}")]
    InsufficientIndependentPairs { required: usize, found: usize },
    #[error("schema version mismatch: expected {expected}, got {got}")]
    SchemaMismatch { expected: String, got: String },
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("numeric failure in {0}")]
    Numeric(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{step}: {source}")]
    Step {
        step: &'static str,
        #[source]
        source: Box<CalmError>,
    },
    #[error("tensor error: {0}")]
    Tensor(#[from] ndgrad::NdError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl CalmError {
    /// Wraps an error with the pipeline step it occurred in.
    pub fn at_step(self, step: &'static str) -> Self {
        CalmError::Step { step, source: Box::new(self) }
    }
}

pub type Result<T, E = CalmError> = std::result::Result<T, E>;
