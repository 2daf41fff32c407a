use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failure classes reported by the engine. The CLI maps these onto exit codes
/// through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("unknown stratum `{0}`")]
    UnknownStratum(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),
    #[error("{what} index {index} out of range 1..={max}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        max: usize,
    },
    #[error("dimension mismatch: expected {expected}, found {found} ({context})")]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Gram matrix has rank {rank} < p = {p}; dependent or empty blocks: {}", blocks.join(", "))]
    RankDeficient {
        rank: usize,
        p: usize,
        blocks: Vec<String>,
    },
    #[error("singular covariate cross-product; collinear columns: {}", columns.join(", "))]
    SingularCovariates { columns: Vec<String> },
    #[error("{count} non-finite value(s) in {context}")]
    NonFinite { count: usize, context: String },
    #[error("strata with fewer than 2 sampled records: {}", strata.join(", "))]
    InsufficientStratumSample { strata: Vec<String> },
    #[error("stratum `{0}` has no domain assignment")]
    UnassignedStratum(String),
    #[error("no admissible linking variable for cell `{cell}`; use design-based direct estimation")]
    NoAdmissibleLink { cell: String },
    #[error("non-finite log-posterior in {0}")]
    NonFiniteLogPosterior(String),
    #[error("MCMC did not converge: R-hat max {rhat_max:.4} exceeds {threshold}")]
    NotConverged { rhat_max: f64, threshold: f64 },
    #[error("infeasible simulation spec: {0}")]
    InfeasibleSpec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// 2 for config/validation problems, 3 for numerical failures, 4 for
    /// convergence failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::RankDeficient { .. }
            | Error::SingularCovariates { .. }
            | Error::NonFinite { .. }
            | Error::NonFiniteLogPosterior(_) => 3,
            Error::NotConverged { .. } => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn csv(path: impl AsRef<std::path::Path>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
