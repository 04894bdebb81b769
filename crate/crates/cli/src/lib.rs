//! Subcommand implementations behind the `tnet` binary.

pub mod commands;
pub mod config;

use std::path::{Path, PathBuf};

use tnet::TnetError;

pub use commands::{run, Cli, Command};
pub use config::RunConfig;

#[derive(Debug)]
pub enum CliError {
    Core(TnetError),
    /// Overlap failure under `--fail-on-overlap`.
    Overlap(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Core(TnetError::Io {
            path: PathBuf::from(path),
            source,
        })
    }

    /// Process exit status: 2 config, 3 IO, 4 divergence, 5 overlap.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Overlap(_) | CliError::Core(TnetError::Overlap(_)) => 5,
            CliError::Core(TnetError::Io { .. } | TnetError::Parse { .. } | TnetError::Serde(_)) => 3,
            CliError::Core(TnetError::Divergence(_) | TnetError::NonFinite { .. }) => 4,
            CliError::Core(
                TnetError::Config { .. }
                | TnetError::Dimension { .. }
                | TnetError::Domain { .. }
                | TnetError::NoOracle(_),
            ) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Overlap(m) => write!(f, "overlap failure: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TnetError> for CliError {
    fn from(e: TnetError) -> Self {
        CliError::Core(e)
    }
}
