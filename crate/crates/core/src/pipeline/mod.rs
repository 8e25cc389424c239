// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven runs: every stage reads and writes inside one run directory
//! and records its outputs in `manifest.json`.

pub mod acceptance;
mod config;
mod report;
mod rundir;
mod stages;
pub mod summary;

pub use config::*;
pub use report::write_report;
pub use rundir::{sha256_file, RunDir, RunManifest, MANIFEST};
pub use stages::{band_statistics, early_layers, run_all, run_stage, training_examples, Stage};
