//! Harness errors mapped onto process exit codes.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, CliError>;

/// Exit code 2: the configuration is unusable.
/// Exit code 3: a required upstream stage has not been run.
/// Exit code 4: artifacts or input data are missing, corrupt, or inconsistent.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: stage `{missing}` must run before `{stage}` (expected {artifact})")]
    Dependency {
        stage: &'static str,
        missing: &'static str,
        artifact: PathBuf,
    },

    #[error("data error: {0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dependency { .. } => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl From<xgap_core::Error> for CliError {
    fn from(e: xgap_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
