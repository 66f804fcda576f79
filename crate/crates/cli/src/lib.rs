//! Library side of the `fpad` binary: configuration and pipeline wiring,
//! kept out of main.rs so integration tests can drive whole runs in-process.

pub mod config;
pub mod pipeline;

pub use config::AppConfig;
pub use pipeline::{
    run_pipeline, CliError, MinutiaeSource, PipelineOptions, PipelineReport, Protocol,
};
