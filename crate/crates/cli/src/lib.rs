//! Command-line front end for the `ctxseg` segmentation library.
//!
//! Every run is described by one TOML file ([`config::ExperimentConfig`]);
//! leaf values can be overridden with `--set key.path=value` and the
//! resolved document is written into the run directory.

pub mod commands;
pub mod config;

pub use config::ExperimentConfig;
