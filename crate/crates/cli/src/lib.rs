//! Scenario-driven orchestration for the entropy-flow laboratory.
//!
//! A scenario is a declarative TOML file naming a potential, an optional
//! drift perturbation, an initial density, a grid, ensemble parameters, and
//! a list of checks to run. The crate parses and validates the file
//! strictly (unknown keys are errors), executes the requested checks
//! against one shared set of cached artifacts (density evolution, entropy
//! series, particle ensembles), and writes a `report.json` plus CSV
//! exports into the scenario's output directory.
//!
//! Exit-code contract of the `entflow` binary:
//!
//! * `0` — every selected check passed;
//! * `1` — the scenario ran to completion but at least one check failed;
//! * `2` — the configuration is invalid (parse error, unknown key, value
//!   out of range, or a check name that does not exist);
//! * `3` — a runtime failure in the numerics or on the filesystem,
//!   reported with the originating module's error.

pub mod checks;
pub mod config;
pub mod export;
pub mod scenario;

/// Errors split by exit code: configuration problems (exit 2) versus
/// runtime failures propagated from the numerics or the filesystem
/// (exit 3).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] entflow_core::Error),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit code this error maps to.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}
