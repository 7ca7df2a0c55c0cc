use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("{context}: [{}] {source}", .source.module())]
    Core { context: String, source: tubular_core::Error },

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HarnessError {
    pub fn core(context: impl Into<String>) -> impl FnOnce(tubular_core::Error) -> Self {
        let context = context.into();
        move |source| HarnessError::Core { context, source }
    }

    pub fn io(path: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    /// Subsystem the failure came from.
    pub fn module(&self) -> &'static str {
        match self {
            HarnessError::Parse { .. } | HarnessError::Scenario(_) => "cli-harness",
            HarnessError::Core { source, .. } => source.module(),
            HarnessError::Io { .. } | HarnessError::Csv(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
