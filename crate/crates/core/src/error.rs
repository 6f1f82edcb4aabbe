use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("stale or mismatched forward cache: {0}")]
    Cache(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    /// The target cannot be emitted in the available number of frames.
    #[error("infeasible CTC target: {frames} frames cannot emit {labels} labels with {repeats} adjacent repeats{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    Infeasible {
        frames: usize,
        labels: usize,
        repeats: usize,
        context: Option<String>,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("instance too large: {0}")]
    Guard(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Attach a human-readable location (utterance id, task id, step) to an error.
    pub fn with_context(self, ctx: impl AsRef<str>) -> Self {
        let ctx = ctx.as_ref();
        match self {
            Error::Infeasible {
                frames,
                labels,
                repeats,
                context,
            } => Error::Infeasible {
                frames,
                labels,
                repeats,
                context: Some(match context {
                    Some(c) => format!("{ctx}: {c}"),
                    None => ctx.to_string(),
                }),
            },
            Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
            Error::Numeric(m) => Error::Numeric(format!("{ctx}: {m}")),
            Error::Validation(m) => Error::Validation(format!("{ctx}: {m}")),
            Error::Cache(m) => Error::Cache(format!("{ctx}: {m}")),
            Error::Io { context, source } => Error::Io {
                context: format!("{ctx}: {context}"),
                source,
            },
            other => other,
        }
    }
}
