use std::path::PathBuf;

use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DEPENDENCY: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing {what} at {}; run `hcae {stage}` first", path.display())]
    Dependency {
        stage: &'static str,
        what: &'static str,
        path: PathBuf,
    },

    #[error("{} already exists; pass --force to replace it", .0.display())]
    Exists(PathBuf),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] hcae::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use hcae::Error as E;
        match self {
            CliError::Config(_) | CliError::Exists(_) => EXIT_CONFIG,
            CliError::Dependency { .. } => EXIT_DEPENDENCY,
            CliError::Core(E::NonFinite { .. } | E::NonFiniteSample { .. } | E::FrozenDrift(_)) => EXIT_NUMERICAL,
            CliError::Core(
                E::InvalidConfig(_) | E::InvalidGeometry(_) | E::UnknownBackbone(_) | E::EmptySelection(_) | E::ShapeMismatch { .. },
            ) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}
