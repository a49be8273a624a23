//! Command implementations behind the `eflow` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod oracle;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
