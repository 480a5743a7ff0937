use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}: not a tensor file")]
    NotATensorFile(PathBuf),

    #[error("{path}: corrupt file ({reason})")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("{0}: invalid data (non-finite element)")]
    InvalidData(PathBuf),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("field divergence: non-finite velocity from {field} at t={t}")]
    FieldDivergence { field: String, t: f64 },

    #[error("non-finite state after step {step} (t={t})")]
    NonFiniteState { step: usize, t: f64 },

    #[error("training diverged at step {step}: loss={loss}")]
    LossDivergence { step: usize, loss: f64 },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or unreadable files rather than
    /// numerical failure.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::FieldDivergence { .. } | Error::NonFiniteState { .. } | Error::LossDivergence { .. }
        )
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if $cond {
        } else {
            return Err($crate::error::Error::Precondition(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
