use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid axis {axis} for tensor of rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("config error{}: {msg}", ConfigLocation(*.line, .key))]
    Config {
        line: Option<usize>,
        key: Option<String>,
        msg: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn config(line: Option<usize>, key: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            key: key.map(str::to_owned),
            msg: msg.into(),
        }
    }

    /// Prefix the message with extra context (e.g. the timestep being processed).
    pub fn context(self, ctx: impl fmt::Display) -> Self {
        match self {
            Error::InvalidArgument(m) => Error::InvalidArgument(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            other => other,
        }
    }
}

struct ConfigLocation<'a>(Option<usize>, &'a Option<String>);

impl fmt::Display for ConfigLocation<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.0 {
            write!(f, " at line {line}")?;
        }
        if let Some(key) = self.1 {
            write!(f, " (key `{key}`)")?;
        }
        Ok(())
    }
}
