use mfg_core::MfgError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at '{key}': {message}")]
    Config { key: String, message: String },
    #[error("{module}: {source}")]
    Solver {
        module: &'static str,
        #[source]
        source: MfgError,
    },
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    /// Process exit status: 2 for configuration problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } => 2,
            _ => 1,
        }
    }
}

/// Attaches the module name to a solver error.
pub trait InModule<T> {
    fn in_module(self, module: &'static str) -> Result<T, CliError>;
}

impl<T> InModule<T> for Result<T, MfgError> {
    fn in_module(self, module: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Solver { module, source })
    }
}

pub type CliResult<T> = Result<T, CliError>;
