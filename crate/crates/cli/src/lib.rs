//! Experiment runner for the distributed auctioneer.
//!
//! Loads an [`ExperimentConfig`], draws instances from the evaluation
//! distributions and runs one of the subcommands in [`commands`].

pub mod commands;
pub mod config;
pub mod instance;
pub mod report;

pub use config::ExperimentConfig;
pub use instance::{gen_game, gen_instance};
pub use report::{RoundReport, RunReport};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or configuration; the message starts with the field name.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] auctioneer::CoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}
