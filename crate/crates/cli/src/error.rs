use std::fmt::Display;

/// Command failure, split by exit code: bad configuration (2) or a failure
/// while running (3).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    pub fn runtime(context: impl Display, e: impl Display) -> Self {
        CliError::Runtime(format!("{context}: {e}"))
    }
}

pub(crate) trait Context<T> {
    fn context(self, what: impl Display) -> Result<T, CliError>;
}

impl<T> Context<T> for thpn::Result<T> {
    fn context(self, what: impl Display) -> Result<T, CliError> {
        self.map_err(|e| match e {
            thpn::Error::Config(_) | thpn::Error::Split(_) => {
                CliError::Config(format!("{what}: {e}"))
            }
            other => CliError::runtime(what, other),
        })
    }
}
