//! Command layer: run configuration, checkpoint and image formats, and the
//! subcommand implementations used by the binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pnm;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use commands::*;
pub use config::{DataConfig, GuidanceConfig, PretrainConfig, RunConfig};
