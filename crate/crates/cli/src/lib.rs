//! Configuration, metrics, charts and the `ape` subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;
pub mod pca;
pub mod plot;

pub use commands::{cmd_eval, cmd_plot, cmd_pretrain, cmd_probe, cmd_train_rl, EncoderSource};
pub use config::RunConfig;
pub use error::{CliError, Result};
