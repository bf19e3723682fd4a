//! Config-driven experiment runner for `plat-core`.
//!
//! `plat <command> --config <path> [--output-dir <path>]` parses a single
//! JSON config, echoes it with all defaults filled in, runs the command and
//! leaves CSV, SVG and JSON artifacts plus a hashed `manifest.json` in the
//! output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod run;

pub use config::{CommandName, CommandParams, ExperimentConfig};
pub use error::{CliError, Result};
pub use run::{execute, RunManifest, RunOutcome, RunStatus};
