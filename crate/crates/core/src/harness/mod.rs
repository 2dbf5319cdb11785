//! Evaluation, experiment orchestration and the command-line surface.

pub mod cli;
pub mod config;
pub mod csv;
pub mod eval;
pub mod gradsuite;

pub use cli::cli_main;
pub use config::{ConfigFile, DatasetSource, RunManifest};
pub use csv::{write_csv, CsvRecord};
pub use eval::{attack_comparison, beta_sweep, evaluate, AttackOutcome, AttackSpec, EvalReport};
pub use gradsuite::run_gradient_suite;
