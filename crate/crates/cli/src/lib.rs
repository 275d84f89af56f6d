//! Driver for the elastography pipeline: TOML configuration, the
//! simulate/coarse/refine/strain/evaluate/run/batch commands and their
//! output files.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::PipelineConfig;
pub use pipeline::PipelineError;
