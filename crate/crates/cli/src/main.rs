//! `qsse`: trajectory runs and verification checks for stochastic
//! Schrodinger models from a JSON experiment config.
//!
//! Exit codes: 0 when the command's checks pass, 1 when a check evaluates
//! cleanly but fails, 2 on usage, config, or runtime errors.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

mod commands;
mod config;
mod expr;
mod output;

use config::ExperimentConfig;
use output::Manifest;

#[derive(Parser)]
#[command(
    name = "qsse",
    version,
    about = "Stochastic Schrodinger trajectory runs and verification checks"
)]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Directory for results.csv and manifest.json.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Worker threads (default: all cores). Results are identical either way.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Overrides run.seed from the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Run the configured ensemble and record norm and energy statistics.
    Simulate,
    /// Fit the mean-energy growth rate and check the norm martingale.
    Heating,
    /// Check the observable drift identities against their time integrals.
    Ehrenfest,
    /// Check the mean regularity functional against its exponential envelope.
    Regularity,
    /// Run the operator identity, growth, phase, and norm-balance checks.
    Verify,
    /// Compare the trajectory ensemble against the dense master equation.
    OracleCompare,
    /// Sweep the regularization strength on one fixed noise path.
    Resolvent,
}

impl Cmd {
    fn name(self) -> &'static str {
        match self {
            Cmd::Simulate => "simulate",
            Cmd::Heating => "heating",
            Cmd::Ehrenfest => "ehrenfest",
            Cmd::Regularity => "regularity",
            Cmd::Verify => "verify",
            Cmd::OracleCompare => "oracle-compare",
            Cmd::Resolvent => "resolvent",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(anyhow!("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot size the worker pool")?;
    }
    let path = cli
        .config
        .ok_or_else(|| anyhow!("--config <PATH> is required"))?;
    let (config, echo) = ExperimentConfig::load(&path)?;
    std::fs::create_dir_all(&cli.out)
        .with_context(|| format!("cannot create output directory {}", cli.out.display()))?;

    let seed = cli.seed.unwrap_or(config.run.seed);
    let mut manifest = Manifest::new(cli.command.name(), seed, echo);
    let started = Instant::now();
    let pass = match cli.command {
        Cmd::Simulate => commands::simulate(&config, &cli.out, cli.seed, &mut manifest),
        Cmd::Heating => commands::heating(&config, &cli.out, cli.seed, &mut manifest),
        Cmd::Ehrenfest => commands::ehrenfest(&config, &cli.out, cli.seed, &mut manifest),
        Cmd::Regularity => commands::regularity(&config, &cli.out, cli.seed, &mut manifest),
        Cmd::Verify => commands::verify(&config, &cli.out, cli.seed, &mut manifest),
        Cmd::OracleCompare => commands::oracle_compare(&config, &cli.out, cli.seed, &mut manifest),
        Cmd::Resolvent => commands::resolvent(&config, &cli.out, cli.seed, &mut manifest),
    }?;
    manifest.pass = pass;
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    manifest.write(&cli.out)?;
    println!("{}", if pass { "PASS" } else { "FAIL" });
    Ok(pass)
}
