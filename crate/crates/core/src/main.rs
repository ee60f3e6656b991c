use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use irrfactor::cli::{self, RunConfig};
use irrfactor::forecaster::Ablation;

#[derive(Parser)]
#[command(name = "irrfactor", version, about = "Irrationality-factor return forecasting")]
struct Args {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed for every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run directory for `report`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Model variant: NS, NM, NR, ND or full.
    #[arg(long, global = true, value_parser = parse_ablation)]
    ablation: Option<Ablation>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic panel CSV.
    Synth,
    /// Train every stage, forecast the test split and backtest it.
    Pipeline,
    /// Print the metric block of a finished run.
    Report {
        /// Run directory; defaults to `--out`.
        dir: Option<PathBuf>,
    },
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    Ablation::parse(s).ok_or_else(|| format!("unknown ablation `{s}`, expected NS, NM, NR, ND or full"))
}

fn load_config(args: &Args) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out.clone_from(out);
    }
    if let Some(a) = args.ablation {
        cfg.ablation = a;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: &Args) -> Result<()> {
    match &args.command {
        Command::Synth => {
            let cfg = load_config(args)?;
            let path = cli::cmd_synth(&cfg)?;
            println!("wrote {}", path.display());
        }
        Command::Pipeline => {
            let cfg = load_config(args)?;
            let report = cli::cmd_pipeline(&cfg)?;
            println!("run directory {} ({})", cfg.out.display(), cfg.stamp());
            print!("{}", cli::format_report(&report));
        }
        Command::Report { dir } => {
            let dir = match (dir, &args.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => load_config(args)?.out,
            };
            let block = cli::cmd_report(&dir).with_context(|| format!("report for {}", dir.display()))?;
            print!("{block}");
        }
    }
    Ok(())
}
