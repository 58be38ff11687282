use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("index out of range: {0}")]
    Index(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(
        "format error{}: {message}",
        offset.map(|o| format!(" at byte {o}")).unwrap_or_default()
    )]
    Format { offset: Option<usize>, message: String },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn format_at(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset: Some(offset),
            message: message.into(),
        }
    }

    pub(crate) fn format(message: impl Into<String>) -> Self {
        Error::Format {
            offset: None,
            message: message.into(),
        }
    }
}
