use std::path::PathBuf;

use weightflow_core as core;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing artifact {}", .0.display())]
    NotFound(PathBuf),

    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("artifact {} does not match its recorded digest", .0.display())]
    Digest(PathBuf),

    #[error(transparent)]
    Core(#[from] core::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::NotFound(path);
        }
        Error::Io { path, source }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), msg: msg.into() }
    }

    /// Process exit status: 3 for numerical failures, 2 for everything the
    /// caller can fix by changing inputs.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) => match e.root() {
                core::Error::Stability { .. } | core::Error::DegenerateInput(_) | core::Error::Stagnation { .. } => 3,
                core::Error::InvalidInput(_) | core::Error::Format(_) | core::Error::Context { .. } => 2,
            },
            _ => 2,
        }
    }
}
