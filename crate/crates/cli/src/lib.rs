//! Configuration-driven experiment runner: parses an experiment description,
//! runs its sweep points through the windowed testbed and writes CSV results.

pub mod config;
pub mod output;
pub mod runner;

pub use config::{
    load_config, parse_config, validate_config, ConfigError, Diagnostic, ExperimentConfig,
    ExperimentKind, SignalConfig, Variant,
};
pub use output::{Cell, SummaryTable};
pub use runner::{
    build_signal, plan_runs, run_experiment, ExperimentReport, RunError, RunOptions, RunOutcome,
    RunResult, RunSpec,
};
