use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::builder::PossibleValuesParser;
use clap::{ArgGroup, Parser, Subcommand};
use cilseg::training::{MethodSpec, METHOD_NAMES};
use cilseg_cli::{eval, gen_data, read_results, render_table, run, RunConfig};

#[derive(Parser)]
#[command(name = "cilseg", version, about = "Class-incremental semantic segmentation workbench")]
struct Cli {
    /// Seed for data generation and training, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to disk.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train one or all methods through the incremental protocol.
    #[command(group(ArgGroup::new("which").required(true).args(["method", "all_methods"])))]
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = PossibleValuesParser::new(METHOD_NAMES))]
        method: Option<String>,
        #[arg(long)]
        all_methods: bool,
        /// Read images from a dataset directory instead of the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Score snapshots on a dataset's test split.
    Eval {
        #[arg(long = "snapshot", required = true, num_args = 1..)]
        snapshots: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print a result table written by `run` or `eval`.
    Report {
        /// A results CSV, or a run directory containing one.
        input: PathBuf,
        /// Show every evaluated stage instead of the final rows.
        #[arg(long)]
        stages: bool,
    },
}

fn out_dir(flag: Option<PathBuf>, config: &RunConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| config.output.clone())
        .unwrap_or_else(|| PathBuf::from(fallback))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, force } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.apply_seed(cli.seed);
            let out = out_dir(out, &cfg, "data");
            gen_data(&cfg, &out, force)?;
            println!("dataset written to {}", out.display());
        }
        Command::Run {
            config,
            method,
            all_methods,
            data,
            out,
            force,
        } => {
            let mut cfg = RunConfig::load(config.as_deref())?;
            cfg.apply_seed(cli.seed);
            let methods = if all_methods {
                MethodSpec::all()
            } else {
                let name = method.context("either --method or --all-methods is required")?;
                vec![name.parse::<MethodSpec>()?]
            };
            let out = out_dir(out, &cfg, "runs");
            let summary = run(&cfg, &methods, data.as_deref(), &out, force)?;
            print!("{}", render_table(&summary.final_rows));
        }
        Command::Eval {
            snapshots,
            data,
            out,
            force,
        } => {
            let reports = eval(&snapshots, &data, &out, force)?;
            print!("{}", render_table(&reports));
        }
        Command::Report { input, stages } => {
            let path = if input.is_dir() {
                input.join(if stages {
                    cilseg_cli::STAGE_RESULTS_CSV
                } else {
                    cilseg_cli::RESULTS_CSV
                })
            } else {
                input
            };
            print!("{}", render_table(&read_results(&path)?));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
