use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Process exit codes. Documented in the README; scripts may rely on them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i32)]
pub enum ExitCode {
    Ok = 0,
    Other = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Dependency = 5,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] oct_stroke::Error),

    #[error("missing output of stage `{stage}`: {path} (run `oct-stroke {stage}` first)")]
    Dependency { stage: &'static str, path: PathBuf },

    #[error("invalid config {path}: {message}")]
    ConfigFile { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        use oct_stroke::Error as E;
        match self {
            CliError::Dependency { .. } => ExitCode::Dependency,
            CliError::ConfigFile { .. } => ExitCode::Config,
            CliError::Core(e) => match e {
                E::Config(_) => ExitCode::Config,
                E::Data(_) | E::Parse { .. } | E::Classification(_) | E::DegenerateFold(_) | E::UndefinedMetric(_) => {
                    ExitCode::Data
                }
                E::Numeric { .. } => ExitCode::Numeric,
                E::Shape { .. } | E::State(_) | E::Io { .. } => ExitCode::Other,
            },
        }
    }
}
