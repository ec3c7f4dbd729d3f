//! Experiment runner: presets, run directories with manifests and logs,
//! and seed-aggregated reports.

pub mod config;
pub mod error;
pub mod plot;
pub mod presets;
pub mod report;
pub mod run;

pub use config::{DataSpec, ExperimentConfig, ExperimentKind};
pub use error::{CliError, Result};
pub use presets::preset;
pub use report::report;
pub use run::{run, Manifest, Outcome};
