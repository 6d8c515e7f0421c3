//! File formats, experiment configuration and subcommands for `pmr-lab`.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod error;
mod fsutil;
pub mod metrics_csv;
pub mod run;

pub use config::{ConfigError, LabConfig};
pub use error::{LabError, Result};
pub use fsutil::sha256_hex;
