use std::path::{Path, PathBuf};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed header: {msg}", path.display())]
    Header { path: PathBuf, msg: String },
    #[error("{}: truncated payload: expected {expected} bytes, found {actual}", path.display())]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("{}: {extra} unexpected bytes after the payload", path.display())]
    TrailingBytes { path: PathBuf, extra: usize },
    #[error("{}: non-finite value at voxel {index}", path.display())]
    NonFiniteValue { path: PathBuf, index: usize },
    #[error("{}: mask value {value} at voxel {index} is not 0 or 1", path.display())]
    BadMaskValue { path: PathBuf, index: usize, value: u8 },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] cdl_core::Error),
}

pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), msg: msg.into() }
    }

    pub fn exit_code(&self) -> i32 {
        use cdl_core::Error as C;
        match self {
            Error::Io { .. }
            | Error::Header { .. }
            | Error::Truncated { .. }
            | Error::TrailingBytes { .. }
            | Error::NonFiniteValue { .. }
            | Error::BadMaskValue { .. }
            | Error::Format { .. } => EXIT_IO,
            Error::Config(_) | Error::Validation(_) => EXIT_VALIDATION,
            Error::Numerical(_) => EXIT_NUMERICAL,
            Error::Core(e) => match e {
                C::OutOfSupport(_)
                | C::NonFiniteLayer { .. }
                | C::DegenerateBatch { .. }
                | C::Diverged { .. }
                | C::InsufficientOverlap { .. }
                | C::NonFiniteCost { .. }
                | C::OutsideDensitySupport(_) => EXIT_NUMERICAL,
                _ => EXIT_VALIDATION,
            },
        }
    }
}
