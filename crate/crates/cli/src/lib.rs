//! Command-line surface for lm4mt: synthetic data generation, training,
//! translation, evaluation and whole experiment protocols (standard, pivot,
//! zero-shot, ablations, robustness) with seed aggregation.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod pipeline;
pub mod report;
pub mod rundir;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use commands::{cmd_evaluate, cmd_experiment, cmd_gen_data, cmd_train, cmd_translate, EvaluateArgs, TranslateArgs};
pub use config::{DataSpec, Direction, ExperimentSpec, Mode, TrainConfig};
pub use experiment::{run_experiment, ExperimentOutput};
pub use report::{ReportRow, Value};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_EVAL: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Core(#[from] lm4mt::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use lm4mt::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Eval(_) => EXIT_EVAL,
            CliError::Core(E::Config(_) | E::Json(_)) => EXIT_CONFIG,
            CliError::Core(E::Divergence { .. }) => EXIT_DIVERGENCE,
            CliError::Core(_) | CliError::Io { .. } => EXIT_OTHER,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
