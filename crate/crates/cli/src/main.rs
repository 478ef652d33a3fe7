use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sdg_cli::config::ExperimentConfig;
use sdg_cli::run::{run_to_dir, RunError};
use sdg_core::catalog::catalog;

const THREADS_ENV: &str = "SDG_THREADS";

/// Path-dependent stochastic differential game experiments.
#[derive(Debug, Parser)]
#[command(name = "sdg", version)]
struct Cli {
    /// Worker threads; defaults to $SDG_THREADS, then to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Root for run directories and the ledger; overrides `output.directory`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// List the built-in game instances and their parameters.
    Catalog {
        #[arg(long)]
        json: bool,
    },
}

fn thread_count(flag: Option<usize>) -> Result<usize, String> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| format!("{THREADS_ENV} must be a nonnegative integer, got {v:?}")),
        Err(_) => Ok(0),
    }
}

fn print_catalog(json: bool) {
    let entries = catalog();
    if json {
        println!("{}", serde_json::to_string_pretty(&entries).expect("catalog serializes"));
        return;
    }
    for e in entries {
        println!("{}: {}", e.name, e.description);
        for p in e.params {
            println!("    {} = {} ({})", p.name, p.default, p.description);
        }
    }
}

fn run(config: PathBuf, output_dir: Option<PathBuf>, threads: usize) -> Result<(), RunError> {
    let cfg = ExperimentConfig::load(&config)?;
    let root = output_dir
        .or_else(|| cfg.output.directory.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    let outcome = run_to_dir(&cfg, &root, threads)?;
    print!("{}", outcome.output.summary);
    println!("artifacts: {}", outcome.directory.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let threads = match thread_count(cli.threads) {
        Ok(n) => n,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    match cli.command {
        Command::Catalog { json } => {
            print_catalog(json);
            ExitCode::SUCCESS
        }
        Command::Run { config, output_dir } => match run(config, output_dir, rayon::current_num_threads()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
    }
}
