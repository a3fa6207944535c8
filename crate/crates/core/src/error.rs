use alloc::string::String;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The explicit step would violate the positivity/stability bound.
    #[error("unstable step: dt = {dt:.3e} exceeds the allowed {max_dt:.3e} (need at least {required_substeps} substeps per epoch)")]
    Stability {
        dt: f64,
        max_dt: f64,
        required_substeps: u64,
    },

    #[error("malformed data: {0}")]
    Format(String),

    #[error("characteristic stagnated at ({x:.4}, {y:.4}) after {steps} steps")]
    Stagnation { x: f64, y: f64, steps: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: alloc::boxed::Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn degenerate(msg: impl Into<String>) -> Self {
        Error::DegenerateInput(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: alloc::boxed::Box::new(self),
        }
    }

    /// The innermost error, with all context layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}
