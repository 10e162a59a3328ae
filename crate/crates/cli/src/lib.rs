//! Benchmark pipeline behind the `tda` binary:
//! train → ground truth → attribute (hyperparameter sweep) → evaluate → report.
//!
//! Every stage writes its artifacts under the run's `output_dir` and can be
//! rerun; stages whose inputs are unchanged reuse what is on disk.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod grid;
pub mod pipeline;
pub mod report;

pub use config::RunConfig;

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DIVERGENCE: i32 = 3;
    pub const INTEGRITY: i32 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] tda_core::Error),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use tda_core::Error as E;
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::Domain(_) | E::Unsupported(_) => exit::CONFIG,
                E::Divergence(_) | E::NonFinite { .. } => exit::DIVERGENCE,
                E::Integrity(_) => exit::INTEGRITY,
                _ => exit::FAILURE,
            },
            CliError::Other(_) => exit::FAILURE,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
