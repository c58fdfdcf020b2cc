//! The `famamba` command-line tool: wavelet inspection, synthetic data,
//! training, restoration, evaluation and benchmarks.

pub mod commands;
pub mod config;
pub mod image_io;
pub mod manifest;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;

pub use commands::Cli;
pub use config::RunConfig;

/// Exit status of a failed command.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, configuration or input extents.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    /// Divergence, corrupted checkpoints or failed numeric checks.
    #[error("{0}")]
    Numeric(String),
    /// A requested quality or scaling threshold was not met.
    #[error("{0}")]
    Threshold(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io(_) => 3,
            Self::Numeric(_) => 4,
            Self::Threshold(_) => 5,
        }
    }
}

impl From<famamba_core::Error> for CliError {
    fn from(e: famamba_core::Error) -> Self {
        use famamba_core::Error as E;
        match e {
            E::Config(_) | E::InvalidArgument { .. } | E::Dimension { .. } => Self::Usage(e.to_string()),
            E::Io(_) => Self::Io(e.to_string()),
            _ => Self::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr as one line.
pub fn main_with<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                eprintln!("{}", e.to_string().lines().next().unwrap_or("usage error"));
            }
            return code;
        }
    };
    match commands::run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
