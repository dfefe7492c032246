//! Command implementations behind the `geoflow` binary: configuration,
//! checkpoint and trajectory file formats, and experiment drivers.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod export;

pub use commands::{cmd_eval, cmd_gen, cmd_gradcheck, cmd_rollout, cmd_snr, cmd_train};
pub use config::RunConfig;
pub use error::{CliError, Result};
