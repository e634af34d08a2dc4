//! Experiment driver behind the `pnca` binary.

pub mod commands;
pub mod config;
pub mod experiment;

pub use config::{parse_config, resolve, ModelKind, RunArgs, RunConfig, UsageError};
pub use experiment::{run_experiment, RunReport};

/// Exit status for each outcome.
pub mod exit {
    pub const OK: i32 = 0;
    /// Unreadable or malformed inputs.
    pub const DATA: i32 = 1;
    /// Training produced non-finite values.
    pub const NUMERIC: i32 = 2;
    /// Invalid command line or configuration.
    pub const USAGE: i32 = 64;
}

/// Exit status for a core error.
pub fn exit_code(err: &pnca_core::Error) -> i32 {
    match err {
        pnca_core::Error::Diverged { .. } | pnca_core::Error::Numeric(_) => exit::NUMERIC,
        _ => exit::DATA,
    }
}
