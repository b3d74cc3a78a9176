use std::path::PathBuf;

use thiserror::Error;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot parse {path}: {source}")]
    BadConfigFile {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt artifact {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },

    #[error("missing prerequisite: {0}")]
    Missing(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Core(#[from] adgen_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::BadConfigFile { .. } => 2,
            CliError::Io { .. } | CliError::BadArtifact { .. } | CliError::Missing(_) => 3,
            CliError::Invariant(_) => 4,
            CliError::Core(e) if e.is_invariant_violation() => 4,
            CliError::Core(adgen_core::Error::Io(_)) => 3,
            CliError::Core(_) => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::io("a", std::io::Error::other("x")).exit_code(), 3);
        assert_eq!(CliError::Missing("reward".into()).exit_code(), 3);
        assert_eq!(CliError::Invariant("x".into()).exit_code(), 4);
        assert_eq!(CliError::Core(adgen_core::Error::NonFinite("x".into())).exit_code(), 4);
        assert_eq!(CliError::Core(adgen_core::Error::Config("x".into())).exit_code(), 2);
    }
}
