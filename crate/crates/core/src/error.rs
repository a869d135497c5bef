use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("glm_family: mean value {value} outside the {family} domain")]
    Domain { family: &'static str, value: f64 },

    #[error("{module}: {message}")]
    Validation {
        module: &'static str,
        message: String,
    },

    #[error("likelihood_engine: core matrix is numerically singular (pivot {pivot})")]
    SingularCore { pivot: usize },

    #[error("likelihood_engine: design is rank deficient; dependent columns: {}", columns.join(", "))]
    RankDeficiency { columns: Vec<String> },

    #[error("likelihood_engine: precision cache built for state version {cached}, current is {current}")]
    StaleCache { cached: u64, current: u64 },

    #[error("gam_selector: contract violation: {0}")]
    ContractViolation(String),

    #[error("data_pipeline: column '{0}' is constant")]
    ConstantColumn(String),

    #[error("data_pipeline: cannot parse '{value}' at row {row}, column '{column}'")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("data_pipeline: schema error: {0}")]
    Schema(String),

    #[error("data_pipeline: survival data contains no events")]
    NoEvents,

    #[error("data_pipeline: {0}")]
    Io(#[from] std::io::Error),

    #[error("data_pipeline: csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn validation(module: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            module,
            message: message.into(),
        }
    }

    /// Name of the module the error originated in.
    pub fn module(&self) -> &'static str {
        match self {
            Error::Domain { .. } => "glm_family",
            Error::Validation { module, .. } => module,
            Error::SingularCore { .. } | Error::RankDeficiency { .. } | Error::StaleCache { .. } => {
                "likelihood_engine"
            }
            Error::ContractViolation(_) => "gam_selector",
            Error::ConstantColumn(_)
            | Error::Parse { .. }
            | Error::Schema(_)
            | Error::NoEvents
            | Error::Io(_)
            | Error::Csv(_) => "data_pipeline",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
