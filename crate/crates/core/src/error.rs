use std::path::PathBuf;

/// Errors raised by the fitting, inference and I/O layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A scalar argument is outside its admissible range.
    #[error("domain error: {0}")]
    Domain(String),

    /// Shapes or counts that must agree do not.
    #[error("structural error: {0}")]
    Structural(String),

    /// A graph or random structure could not be built.
    #[error("construction error: {0}")]
    Construction(String),

    #[error("iterates diverged at iteration {iteration} (norm {norm:e})")]
    Divergence { iteration: usize, norm: f64 },

    /// Factorization or density estimate failed; the message carries a hint.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for failures caused by bad inputs rather than by numerics or I/O.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Domain(_) | Error::Structural(_) | Error::Construction(_) | Error::Parse { .. }
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Divergence { .. } | Error::Numerical(_))
    }
}
