use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, unreadable configuration or a missing input artifact.
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
        /// Artifacts present in the output directory when the stage failed.
        artifacts: Vec<PathBuf>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Stage { .. } => 3,
        }
    }

    pub fn stage(stage: &'static str, err: impl std::fmt::Display) -> Self {
        CliError::Stage {
            stage,
            message: err.to_string(),
            artifacts: Vec::new(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Attaches a stage name to library errors.
pub trait InStage<T> {
    fn in_stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> InStage<T> for std::result::Result<T, E> {
    fn in_stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|e| CliError::stage(stage, e))
    }
}
