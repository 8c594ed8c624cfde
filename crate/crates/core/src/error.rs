use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid record at row {row}: {msg}")]
    InvalidRecord { row: usize, msg: String },

    #[error("parse error at row {row}, column `{column}`: {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("no exact event times; baseline jumps are undefined")]
    NoEvents,

    #[error("empty risk set at event time {0}")]
    EmptyRiskSet(f64),

    #[error("Newton iteration did not converge after {iterations} steps (gradient norm {grad_norm:e})")]
    NewtonNonConvergence {
        iterations: usize,
        last: Vec<f64>,
        grad_norm: f64,
    },

    #[error("singular matrix in {context} (condition number {condition:e})")]
    Singular { context: String, condition: f64 },

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("too many failed replications: {failed} of {total}")]
    FailureRate { failed: usize, total: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn at_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
