//! Configuration, trace export and equivalence checks used by the CLI.

pub mod config;
pub mod equivalence;
pub mod output;

pub use config::{parse_config, parse_config_str, ExperimentConfig, InitSpec, MetricsConfig};
pub use equivalence::{compare_models, equivalence_check, EquivalenceReport};
pub use output::{summarize, write_run, OutputFormat, Summary};
