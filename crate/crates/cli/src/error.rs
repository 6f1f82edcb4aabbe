use thiserror::Error;

/// Errors surfaced by the command layer, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("{0}")]
    ChecksFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::ChecksFailed(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

impl From<metactc::Error> for CliError {
    fn from(e: metactc::Error) -> Self {
        use metactc::Error as E;
        let msg = e.to_string();
        match e {
            E::Config { .. } => CliError::Config(msg),
            E::Numeric(_) | E::Cache(_) | E::Guard(_) => CliError::Numeric(msg),
            E::Dimension(_)
            | E::Infeasible { .. }
            | E::Validation(_)
            | E::UnknownLanguage(_)
            | E::Parse { .. }
            | E::Io { .. } => CliError::Data(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// I/O failure on an output or input path.
pub(crate) fn io_err(what: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CliError {
    move |e| CliError::Data(format!("{what}: {e}"))
}
