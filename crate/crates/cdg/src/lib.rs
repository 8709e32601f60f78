//! File formats, configuration and command-line front end for `cdg-core`.
//!
//! - [`pnm`]: binary PGM label maps and PPM images.
//! - [`distfile`]: text class-distribution files.
//! - [`checkpoint`]: CRC-protected binary network checkpoints.
//! - [`config`]: INI-style run configuration.
//! - [`heatmap`]: greyscale renderings of distributions and activations.
//! - [`report`]: metric and training-log CSV.
//! - [`cli`]: the `cdg` command.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod distfile;
pub mod error;
pub mod heatmap;
pub mod pnm;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::{DataConfig, RunConfig};
pub use error::{Error, Result};
