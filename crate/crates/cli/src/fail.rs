use std::fmt;
use std::path::Path;

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn config(m: impl Into<String>) -> Self {
        Self { code: 2, message: m.into() }
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self { code: 3, message: m.into() }
    }

    pub fn runtime(m: impl Into<String>) -> Self {
        Self { code: 4, message: m.into() }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::runtime(format!("i/o error on {}: {e}", path.display()))
    }
}

impl From<misfitlab::Error> for Failure {
    fn from(e: misfitlab::Error) -> Self {
        Self { code: e.exit_code(), message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}
