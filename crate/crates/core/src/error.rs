use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid cutoff specification: {0}")]
    InvalidSpec(String),

    #[error("region {region}: area weights sum to zero")]
    DegenerateWeights { region: String },

    #[error("parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("singular design: column(s) {} are collinear with earlier columns", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("separation detected in the GPS model ({0}); consider enabling the ridge fallback")]
    Separation(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NotConverged { what: String, iterations: usize },

    #[error("overlap trimming removed every unit (GPS element {element} has an empty range intersection)")]
    AllTrimmed { element: usize },

    #[error("positivity violation: unit {unit} has zero probability for its observed category {category}")]
    PositivityViolation { unit: usize, category: usize },

    #[error("ratio scale unavailable for contrast ({to};{from}): nonpositive denominator {denominator}")]
    ScaleUnavailable {
        to: usize,
        from: usize,
        denominator: f64,
    },

    #[error("covariate '{0}' has zero standard deviation")]
    ConstantCovariate(String),

    #[error("{failed} of {total} replicates failed (limit {limit}); first failure: {first}")]
    ReplicateFailures {
        failed: usize,
        total: usize,
        limit: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors raised by iterative fitters rather than by bad input.
    pub fn is_convergence(&self) -> bool {
        matches!(self, Error::Separation(_) | Error::NotConverged { .. })
    }
}
