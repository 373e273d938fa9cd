use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("operator entry ({row}, {col}) = {value} is not strictly positive")]
    NonPositiveEntry { row: usize, col: usize, value: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("{what} has negative component {value} at index {index}")]
    NegativeValue {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("{what} has non-finite component at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("forward projection (Hx)[{index}] = {value} is not strictly positive")]
    NonPositiveForward { index: usize, value: f64 },

    #[error("degenerate denominator {value:e} at parameter {index}")]
    DegenerateDenominator { index: usize, value: f64 },

    #[error("rule {rule} cannot be used with the {noise} noise model")]
    IncompatibleRule { rule: String, noise: String },

    #[error("solver {solver} cannot be used with the {noise} noise model")]
    IncompatibleSolver { solver: String, noise: String },

    #[error("image has no 2D shape")]
    MissingShape,

    #[error("could not certify data outside the cone: {0}")]
    Certification(String),

    #[error("empty trace: {0}")]
    EmptyTrace(String),

    #[error("parse error in {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        });
    }
    Ok(())
}
