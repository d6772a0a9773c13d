use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    /// A stage ran before the stage it depends on.
    #[error("{0}")]
    State(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] nasprune::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Csv(#[from] csv::Error),
    #[error("{0}")]
    Toml(#[from] toml::de::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn class(&self) -> &'static str {
        use nasprune::Error as E;
        match self {
            Self::Usage(_) => "usage",
            Self::State(_) => "state",
            Self::Config(_) | Self::Toml(_) => "config",
            Self::Io(_) => "io",
            Self::Csv(_) => "table",
            Self::Core(e) => match e {
                E::Config(_) => "config",
                E::Input(_) => "input",
                E::Grid(_) => "grid",
                E::NonFinite(_) => "numeric",
                E::UnknownVersion(_) | E::CorruptTable(_) | E::ShortFile { .. } | E::Manifest(_) => "checkpoint",
                E::Io(_) => "io",
                E::Dimension { .. } | E::Contract(_) => "contract",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::State(_) => 3,
            _ => 1,
        }
    }
}

pub fn state(msg: impl Into<String>) -> CliError {
    CliError::State(msg.into())
}
