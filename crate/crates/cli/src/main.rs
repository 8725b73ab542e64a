//! `metasaem`: simulate datasets, fit emulators, estimate population parameters and run
//! replication studies from a TOML configuration.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use metasaem::{VariantKind, VariantSpec};

use commands::Globals;
use error::CliError;

#[derive(Parser)]
#[command(name = "metasaem", version, about = "Mixed-effects estimation with Gaussian-process emulators")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Validate and print the plan without computing.
    #[arg(long, global = true)]
    dry_run: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from the configured truth.
    Simulate,
    /// Evaluate the model on a design and fit one emulator per observation time.
    Emulate,
    /// Estimate population parameters with SAEM.
    Fit {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "exact")]
        variant: VariantKind,
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Replicated estimation study.
    Bench {
        #[arg(long)]
        replications: Option<usize>,
        /// Comma-separated list such as `exact,simple:100,intermediate:100`.
        #[arg(long)]
        variants: Option<String>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = &cli.global;
    let config = g.config.clone().ok_or_else(|| CliError::Usage("--config <file.toml> is required".into()))?;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure threads: {e}")))?;
    }
    let globals = Globals { config, seed: g.seed, dry_run: g.dry_run, out_dir: g.out_dir.clone() };
    match cli.command {
        Command::Simulate => commands::simulate(&globals),
        Command::Emulate => commands::emulate(&globals),
        Command::Fit { data, variant, bank } => commands::fit(&globals, data, variant, bank),
        Command::Bench { replications, variants } => {
            let variants = variants
                .map(|s| s.split(',').map(commands::parse_variant_spec).collect::<Result<Vec<VariantSpec>, _>>())
                .transpose()?;
            commands::bench(&globals, replications, variants)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
