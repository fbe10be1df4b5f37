use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};

use hihtp::experiment::{self, ExperimentConfig, SweepGrid};
use hihtp::hier::default_block_score;
use hihtp::protocol::{self, Field, ProtocolConfig};
use hihtp::{Dims, Error, Result};

/// Hierarchical hard thresholding pursuit for blind deconvolution and
/// demixing, with a reciprocity-keyed secure access simulator.
#[derive(Parser)]
#[command(name = "hihtp", version)]
struct Cli {
    /// Master seed (overrides the configuration file).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output file; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one planted instance and print the recovery report as JSON.
    Solve(SolveArgs),
    /// Run a phase-diagram sweep from --config and write CSV.
    Sweep(SweepArgs),
    /// Run the end-to-end secure access protocol from --config and write JSON.
    Protocol,
    /// Sweep at the published dimensions (N=1024, N_d=E=128, N_r=10).
    Paper(PaperArgs),
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long = "n", default_value_t = 256)]
    n: usize,
    #[arg(long = "taps", default_value_t = 32)]
    taps: usize,
    #[arg(long = "code-len", default_value_t = 32)]
    code_len: usize,
    #[arg(long = "users", default_value_t = 6)]
    users: usize,
    #[arg(long, default_value_t = 2)]
    mu: usize,
    #[arg(long, default_value_t = 2)]
    sigma: usize,
    #[arg(long, default_value_t = 2)]
    s: usize,
    /// Noise level; noiseless when absent.
    #[arg(long = "snr-db")]
    snr_db: Option<f64>,
    /// real or complex.
    #[arg(long, default_value = "real")]
    field: String,
    #[command(flatten)]
    strategy: StrategyArgs,
}

#[derive(Args)]
struct StrategyArgs {
    /// Block score used by hierarchical thresholding.
    #[arg(long)]
    score: Option<String>,
    /// Operator representation: matrix-free or dense.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    /// Record wall-clock solve times (makes the CSV run-dependent).
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    strategy: StrategyArgs,
}

#[derive(Args)]
struct PaperArgs {
    /// Single cell, e.g. `mu=2,sigma=2,s=2`; the full grid when absent.
    #[arg(long)]
    cell: Option<String>,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long)]
    timing: bool,
    #[arg(long)]
    score: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn require_config(cli: &Cli, sub: &str) -> Result<ExperimentConfig> {
    match &cli.config {
        Some(path) => ExperimentConfig::from_path(path).map_err(|e| match e {
            Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
            other => other,
        }),
        None => Cli::command()
            .error(
                ErrorKind::MissingRequiredArgument,
                format!("`{sub}` requires --config <PATH>"),
            )
            .exit(),
    }
}

fn parse_field(name: &str) -> Result<Field> {
    match name {
        "real" => Ok(Field::Real),
        "complex" => Ok(Field::Complex),
        other => Err(Error::InvalidConfig(format!("unknown field `{other}` (real, complex)"))),
    }
}

fn apply_strategy(score: &mut String, backend: &mut String, args: &StrategyArgs) {
    if let Some(s) = &args.score {
        score.clone_from(s);
    }
    if let Some(b) = &args.backend {
        backend.clone_from(b);
    }
}

fn write_output(out: Option<&Path>, body: &[u8]) -> Result<()> {
    match out {
        Some(path) => File::create(path)?.write_all(body)?,
        None => io::stdout().lock().write_all(body)?,
    }
    Ok(())
}

fn write_records(out: Option<&Path>, records: &[experiment::SweepRecord]) -> Result<()> {
    let mut buf = Vec::new();
    experiment::write_csv(records, &mut buf)?;
    write_output(out, &buf)
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Solve(args) => {
            let mut cfg = match &cli.config {
                Some(_) => require_config(cli, "solve")?.protocol()?,
                None => {
                    let dims = Dims::new(args.n, args.taps, args.code_len, args.users)?;
                    let mut cfg = ProtocolConfig::new(dims, args.s, args.sigma, args.mu);
                    cfg.snr_db = args.snr_db;
                    cfg.field = parse_field(&args.field)?;
                    cfg
                }
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            apply_strategy(&mut cfg.score, &mut cfg.backend, &args.strategy);
            let report = experiment::solve_planted(&cfg)?;
            let mut body = serde_json::to_vec_pretty(&report)?;
            body.push(b'\n');
            write_output(out, &body)
        }
        Command::Sweep(args) => {
            let mut grid = require_config(cli, "sweep")?.grid()?;
            if let Some(seed) = cli.seed {
                grid.seed = seed;
            }
            grid.timing = args.timing;
            apply_strategy(&mut grid.score, &mut grid.backend, &args.strategy);
            info!("sweeping {} cells x {} trials", grid.cells().len(), grid.trials);
            write_records(out, &experiment::sweep(&grid)?)
        }
        Command::Protocol => {
            let mut cfg = require_config(cli, "protocol")?.protocol()?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let outcome = protocol::run_protocol(&cfg)?;
            let mut body = serde_json::to_vec_pretty(&outcome)?;
            body.push(b'\n');
            write_output(out, &body)
        }
        Command::Paper(args) => {
            let mut grid = SweepGrid::published(args.trials, cli.seed.unwrap_or(0));
            grid.timing = args.timing;
            grid.score = args
                .score
                .clone()
                .unwrap_or_else(|| default_block_score().name().into());
            match &args.cell {
                Some(cell) => {
                    let (mu, sigma, s) = parse_cell(cell)?;
                    grid.mu = vec![mu];
                    grid.sigma = vec![sigma];
                    grid.s = vec![s];
                }
                None => warn!(
                    "full published grid: {} cells x {} trials at N=1024, expect hours",
                    grid.cells().len(),
                    grid.trials
                ),
            }
            write_records(out, &experiment::sweep(&grid)?)
        }
    }
}

fn parse_cell(text: &str) -> Result<(usize, usize, usize)> {
    let bad = || Error::InvalidConfig(format!("--cell expects mu=..,sigma=..,s=.., got `{text}`"));
    let (mut mu, mut sigma, mut s) = (None, None, None);
    for part in text.split(',') {
        let (key, value) = part.split_once('=').ok_or_else(bad)?;
        let value: usize = value.trim().parse().map_err(|_| bad())?;
        match key.trim() {
            "mu" => mu = Some(value),
            "sigma" => sigma = Some(value),
            "s" => s = Some(value),
            _ => return Err(bad()),
        }
    }
    Ok((mu.ok_or_else(bad)?, sigma.ok_or_else(bad)?, s.ok_or_else(bad)?))
}
