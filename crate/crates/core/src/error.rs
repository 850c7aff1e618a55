use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible mesh refinement: {0}")]
    InfeasibleRefinement(String),

    #[error("validation failed: {0}")]
    Validation(String),

    /// Malformed input document. `location` names the line/column and, where
    /// known, the field path.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("singular system: {0}")]
    Singular(String),

    #[error("ill-posed problem: {0}")]
    IllPosed(String),

    #[error("solver did not converge: {0}")]
    NonConvergence(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn mismatch(what: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected,
            actual,
        }
    }
}

/// Deserialize a JSON document, reporting line/column and the failing field
/// path on error.
pub(crate) fn from_json_str<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    match serde_path_to_error::deserialize(&mut de) {
        Ok(v) => Ok(v),
        Err(e) => {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let location = if path.is_empty() || path == "." {
                format!("line {}, column {}", inner.line(), inner.column())
            } else {
                format!("line {}, column {}, field `{}`", inner.line(), inner.column(), path)
            };
            Err(Error::parse(location, inner.to_string()))
        }
    }
}
