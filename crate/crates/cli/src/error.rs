use thiserror::Error;

/// Process exit statuses.
pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, bad or incomplete configuration.
    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] lsaf_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(lsaf_core::Error::Config(_)) => EXIT_USAGE,
            CliError::Core(lsaf_core::Error::Numeric { .. }) => EXIT_NUMERIC,
            CliError::Core(_) | CliError::Io { .. } => EXIT_DATA,
        }
    }
}
