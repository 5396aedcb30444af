//! Command-line front end for the co-exploration engine: strict TOML
//! configuration, the search run with resumable checkpoints and
//! deterministic artifacts, space analysis commands, and a verification
//! harness for the exact pipeline optimizer.

pub mod commands;
pub mod config;

use coex_core::search::SearchError;

/// CLI-level errors carrying the process exit code: configuration
/// problems exit 2, evaluator failures exit 3, everything else 1.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("evaluator error: {0}")]
    Evaluator(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Evaluator(_) => 3,
            CliError::Other(_) => 1,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Other(e.into())
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Config(msg) => CliError::Config(msg),
            SearchError::Model(m) => CliError::Config(m.to_string()),
            SearchError::Eval(ev) => CliError::Evaluator(ev.to_string()),
            other => CliError::Other(anyhow::Error::new(other)),
        }
    }
}
