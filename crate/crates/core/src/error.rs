use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Training { epoch: usize, reason: String },

    /// The full-row-rank assumption behind the equivalence certificate does not hold.
    #[error("rank hypothesis violated: {0}")]
    RankHypothesis(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable category, used by the command-line tool.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::RankHypothesis(_) => "rank",
            Error::Precondition(_) => "precondition",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
