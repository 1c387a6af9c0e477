use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] ultraseg_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {detail}")]
    Decode { path: PathBuf, detail: String },
    #[error("{path}: image has zero size")]
    EmptyImage { path: PathBuf },
    #[error("{path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },
    #[error("no counterpart for sample `{0}`")]
    Pairing(String),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit status: 2 usage/config, 3 data or I/O, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use ultraseg_core::Error as E;
        match self {
            Error::Core(E::NonFinite(_)) => 4,
            Error::Core(E::Checkpoint(_)) => 3,
            Error::Core(_) | Error::Usage(_) => 2,
            Error::Io { .. } | Error::Decode { .. } | Error::EmptyImage { .. } | Error::Manifest { .. } | Error::Pairing(_) => 3,
        }
    }
}
