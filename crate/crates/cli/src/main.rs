//! `xva-mild`: configuration-driven front end of the valuation pipeline.
//!
//! Exit codes: 0 success, 1 a verification check failed, 2 invalid
//! configuration or model condition, 3 invalid-path budget exceeded,
//! 4 runtime failure (I/O, grid coverage, non-finite estimates).

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use config::RunConfig;
use error::CliError;
use manifest::{FailedRun, OutputDir, RunManifest};

const TOOL: &str = "xva-mild";

#[derive(Parser, Debug)]
#[command(name = TOOL, version, about = "Mild-solution XVA valuation under stochastic volatility")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "XVA_MILD_THREADS")]
    threads: Option<usize>,

    /// Overrides `mc.master_seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Simulate (X, V) paths under the physical measure.
    Simulate,
    /// Survival, hazard and default-density curves.
    Defaults {
        /// Cross-check the survival curves with this many sampled default times.
        #[arg(long)]
        mc_check: Option<usize>,
    },
    /// Solve for the valuation function on the grid.
    Solve,
    /// Run the property checks on the configuration.
    Verify,
    /// Solve and report the value at the initial state.
    Price,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Defaults { .. } => "defaults",
            Command::Solve => "solve",
            Command::Verify => "verify",
            Command::Price => "price",
        }
    }
}

fn load(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.mc.master_seed = seed;
    }
    Ok(cfg)
}

fn dispatch(cmd: Command, cfg: &RunConfig, out: &mut OutputDir) -> Result<i32, CliError> {
    match cmd {
        Command::Simulate => commands::simulate(cfg, out),
        Command::Defaults { mc_check } => commands::defaults(cfg, out, mc_check),
        Command::Solve => commands::solve(cfg, out).map(|(code, _)| code),
        Command::Verify => commands::verify(cfg, out),
        Command::Price => commands::price(cfg, out),
    }
}

fn run(cli: &Cli) -> Result<i32, CliError> {
    let started = Instant::now();
    let threads = match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be positive".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Io(std::io::Error::other(e)))?;

    let mut out = OutputDir::prepare(&cli.out)?;
    let cfg = match load(cli) {
        Ok(c) => c,
        Err(e) => return fail(cli, &out, None, e),
    };
    match dispatch(cli.command, &cfg, &mut out) {
        Ok(code) => {
            let manifest = RunManifest {
                tool: TOOL.into(),
                version: env!("CARGO_PKG_VERSION").into(),
                command: cli.command.name().into(),
                config_hash: cfg.hash(),
                seeds: out.seeds.clone(),
                threads,
                wall_time_s: started.elapsed().as_secs_f64(),
                exit_code: code,
                outputs: out.digests()?,
            };
            out.write_manifest(&manifest)?;
            Ok(code)
        }
        Err(e) => fail(cli, &out, Some(cfg.hash()), e),
    }
}

fn fail(cli: &Cli, out: &OutputDir, config_hash: Option<String>, e: CliError) -> Result<i32, CliError> {
    let code = e.exit_code();
    eprintln!("error: {e}");
    out.write_failure(&FailedRun {
        tool: TOOL.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cli.command.name().into(),
        config_hash,
        exit_code: code,
        error: e.to_string(),
        partial_outputs: out.written(),
    })?;
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
