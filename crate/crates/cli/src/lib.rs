//! Command-line pipeline: segmentation, tiling, mixed-supervision training,
//! inference, evaluation and retention analysis over a slide manifest.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod workdir;

pub use config::RunConfig;
pub use error::CliError;
