use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use switchem::config::ConfigFile;
use switchem::experiment::{run_experiment, run_fit, run_simulate};
use switchem::Error;

/// Simulate and estimate regime-switching OU-type models with NIG noise.
#[derive(Parser)]
#[command(name = "switchem", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate one path and write path.csv.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the model to a path.csv-style file.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Simulate and fit `replications` paths; write summary.csv.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical { .. } | Error::ImpossibleTransition { .. } | Error::Iteration { .. } => 3,
        Error::Io(_) => 1,
        _ => 2,
    }
}

fn load(path: &Path) -> Result<ConfigFile, Error> {
    let mut cfg = ConfigFile::load(path)?;
    cfg.apply_env()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.cmd {
        Cmd::Simulate { config, out } => {
            let cfg = load(&config)?;
            let s = run_simulate(&cfg, &out)?;
            println!("n = {}, T = {}, h = {}, seed = {}", s.n, s.horizon, s.h, s.seed);
            Ok(0)
        }
        Cmd::Fit { config, data, out, jobs } => {
            let cfg = load(&config)?;
            let r = run_fit(&cfg, &data, &out, jobs)?;
            println!(
                "status = {}, iterations = {}, b = {:?}, lambda = {}, delta = {}",
                r.status, r.iterations, r.estimate.b, r.estimate.lambda, r.estimate.delta
            );
            if let Some(f) = &r.failure {
                eprintln!("{f}");
                return Ok(3);
            }
            Ok(0)
        }
        Cmd::Experiment { config, out, jobs } => {
            let cfg = load(&config)?;
            let s = run_experiment(&cfg, &out, jobs)?;
            for r in s.records.iter().filter(|r| !r.succeeded()) {
                eprintln!("replication {} (seed {}): {}", r.rep, r.seed, r.message.as_deref().unwrap_or(&r.status));
            }
            println!("{} of {} replications succeeded; medians {:?}", s.successes(), s.records.len(), s.medians);
            Ok(if s.acceptable() { 0 } else { 3 })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
