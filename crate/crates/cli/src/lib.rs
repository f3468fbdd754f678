//! Experiment configuration, pipeline orchestration and the command surface
//! of the `conceptvae` binary.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{apply_overrides, load_config, parse_config, parse_config_str, ExperimentConfig};
pub use pipeline::{run_pipeline, ExperimentManifest, Phase, RunOptions, RunOutcome};
