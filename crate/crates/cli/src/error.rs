use std::path::PathBuf;

use sqr_core::SqrError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, configuration values or input files.
    #[error("{0}")]
    Input(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CliError>,
    },

    #[error(transparent)]
    Core(#[from] SqrError),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code: 1 for input problems, 2 for numerical failures,
    /// 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) | CliError::Parse { .. } | CliError::Read { .. } => 1,
            CliError::Stage { source, .. } => source.exit_code(),
            CliError::Core(e) => core_exit_code(e),
            CliError::Write { .. } | CliError::Internal(_) => 3,
        }
    }

    pub fn in_stage(stage: &'static str) -> impl FnOnce(CliError) -> CliError {
        move |e| CliError::Stage { stage, source: Box::new(e) }
    }
}

fn core_exit_code(e: &SqrError) -> i32 {
    match e {
        SqrError::InvalidSpec(_) | SqrError::InvalidInput(_) | SqrError::Degenerate { .. } => 1,
        SqrError::AtTau { source, .. } => core_exit_code(source),
        SqrError::NotPositiveDefinite { .. } | SqrError::Numerical(_) => 2,
    }
}
