use thiserror::Error;

/// Errors raised across the library. See [`Error::exit_code`] for the CLI
/// mapping.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },

    #[error("outfit `{outfit}` references unknown garment id `{garment}`")]
    Referential { outfit: String, garment: String },

    #[error("unknown garment id `{0}`")]
    Lookup(String),

    #[error("feature cache is missing {} garment(s): {}", .0.len(), .0.join(", "))]
    CacheMiss(Vec<String>),

    #[error("data error: {0}")]
    Data(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// `Config` → 2; `Parse`, `Referential`, `Lookup`, `CacheMiss` and
    /// `Data` → 3; everything else → 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Parse { .. } | Error::Referential { .. } | Error::Lookup(_) | Error::CacheMiss(_) | Error::Data(_) => 3,
            _ => 4,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
