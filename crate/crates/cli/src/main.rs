use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use dpdlab_cli::{load_config, run_experiment, validate_config, RunOptions};

#[derive(Parser)]
#[command(name = "dpdlab", version, about = "Adaptive predistortion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Sweep points run in parallel (0: one per core).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Leave out the generation-time line at the top of each output file.
        #[arg(long)]
        no_timestamp: bool,
    },
    /// Check a config file and list every problem found.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Validate { config } => {
            let cfg = load_config(&config)?;
            let diags = validate_config(&cfg);
            if diags.is_empty() {
                println!("{}: ok", config.display());
                return Ok(ExitCode::SUCCESS);
            }
            for d in &diags {
                eprintln!("{}: {d}", config.display());
            }
            Ok(ExitCode::FAILURE)
        }
        Command::Run {
            config,
            output_dir,
            seed,
            jobs,
            no_timestamp,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let opts = RunOptions {
                jobs,
                timestamp: !no_timestamp,
            };
            let report = run_experiment(&cfg, &opts)
                .with_context(|| format!("experiment {}", config.display()))?;
            println!(
                "{} runs written to {}",
                report.runs.len(),
                report.output_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
