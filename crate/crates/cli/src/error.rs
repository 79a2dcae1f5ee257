use std::path::Path;

use headrank_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("stale input {path}: expected sha256 {expected}, found {actual}")]
    Stale {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("manifest {path}: {reason}")]
    Manifest { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("phase {phase} failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<CliError>,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Machine-readable failure class and its process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Input,
    Stale,
    Io,
    Numeric,
    Checkpoint,
}

impl Category {
    pub fn name(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Input => "input",
            Category::Stale => "stale-input",
            Category::Io => "io",
            Category::Numeric => "numeric",
            Category::Checkpoint => "checkpoint",
        }
    }

    /// Exit 2 is left to argument-parsing errors.
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 3,
            Category::Input => 4,
            Category::Stale => 5,
            Category::Io => 6,
            Category::Numeric => 7,
            Category::Checkpoint => 8,
        }
    }
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn in_phase(self, phase: &'static str) -> Self {
        CliError::Phase {
            phase,
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> Category {
        match self {
            CliError::Config(_) => Category::Config,
            CliError::Stale { .. } | CliError::Manifest { .. } => Category::Stale,
            CliError::Io { .. } => Category::Io,
            CliError::Phase { source, .. } => source.category(),
            CliError::Core(e) => match e {
                CoreError::Config(_) => Category::Config,
                CoreError::Io { .. } => Category::Io,
                CoreError::Checkpoint(_) => Category::Checkpoint,
                CoreError::Diverged { .. } | CoreError::Autodiff(_) => Category::Numeric,
                CoreError::SequenceTooLong { .. }
                | CoreError::DepthOutOfRange { .. }
                | CoreError::MissingHead(_)
                | CoreError::Invalid(_)
                | CoreError::Parse { .. } => Category::Input,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }

    /// `error[<category>]: <message>`, one line.
    pub fn report_line(&self) -> String {
        format!("error[{}]: {}", self.category().name(), self)
    }
}

pub trait PhaseExt<T> {
    fn phase(self, phase: &'static str) -> CliResult<T>;
}

impl<T, E: Into<CliError>> PhaseExt<T> for std::result::Result<T, E> {
    fn phase(self, phase: &'static str) -> CliResult<T> {
        self.map_err(|e| e.into().in_phase(phase))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categories_and_codes() {
        let e = CliError::Stale {
            path: "x".into(),
            expected: "a".into(),
            actual: "b".into(),
        };
        assert_eq!(e.exit_code(), 5);
        assert!(e.report_line().starts_with("error[stale-input]: stale input x"));
        let e = CliError::from(CoreError::Diverged { step: 3, last_total: None }).in_phase("train");
        assert_eq!(e.category(), Category::Numeric);
        assert!(e.to_string().starts_with("phase train failed"));
        assert_eq!(CliError::Config("x".into()).exit_code(), 3);
    }
}
