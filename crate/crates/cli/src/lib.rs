//! Batch command line for `fracmf`: argument parsing, config resolution and exit codes.

pub mod commands;
pub mod config;
pub mod report;
pub mod suites;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fracmf::finance_apps::ThetaConvention;

use config::{config_error, Command, ConfigError, ModelConfig, PayoffConfig, RunConfig, Suite};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "fracmf", version, about = "Mean-field fBm SDE solver, Malliavin weights and sensitivities")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Run invariant suites; exit 1 if any check fails
    Validate(Flags),
    /// Solve the law curves and dump paths
    Simulate(Flags),
    /// d/dx E[payoff(X_t)] by weights and by finite differences
    Greeks(Flags),
    /// Variance-swap sensitivity to the initial volatility
    Varswap(Flags),
    /// Two-factor volatility model sensitivity
    Volmodel(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// TOML run configuration; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model catalog entry: geometric, riccati, affine
    #[arg(long)]
    pub model: Option<String>,
    /// Hurst parameter
    #[arg(long = "H", alias = "hurst")]
    pub hurst: Option<f64>,
    /// Grid cells
    #[arg(long)]
    pub n: Option<usize>,
    /// Monte Carlo paths
    #[arg(long = "N", alias = "paths")]
    pub paths: Option<usize>,
    /// Horizon
    #[arg(long = "T", alias = "horizon")]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads
    #[arg(long, env = "FRACMF_WORKERS")]
    pub workers: Option<usize>,
    /// Picard tolerance
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Relative finite-difference step
    #[arg(long)]
    pub fd_step: Option<f64>,
    /// JSON report path (stdout when absent)
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// CSV table path
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the resolved configuration as TOML and exit
    #[arg(long)]
    pub dump_config: bool,
    /// Theta equation convention (varswap)
    #[arg(long, value_parser = parse_convention)]
    pub convention: Option<ThetaConvention>,
    /// Initial point of the differentiated coordinate (model x, swap volatility, or x2)
    #[arg(long)]
    pub x: Option<f64>,
    /// Mean-reversion level (varswap, volmodel)
    #[arg(long)]
    pub mu: Option<f64>,
    /// Quadratic feedback (varswap, volmodel)
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long, value_enum)]
    pub suite: Option<Suite>,
    /// linear, constant:c, power:p, smooth-call:strike:width
    #[arg(long)]
    pub payoff: Option<PayoffConfig>,
    /// Evaluation time for greeks
    #[arg(long)]
    pub time: Option<f64>,
}

fn parse_convention(s: &str) -> Result<ThetaConvention, String> {
    match s {
        "with-alpha-h" | "with_alpha_h" => Ok(ThetaConvention::WithAlphaH),
        "bare" => Ok(ThetaConvention::Bare),
        other => Err(format!("unknown convention '{other}' (with-alpha-h, bare)")),
    }
}

impl CliCommand {
    fn split(&self) -> (Command, &Flags) {
        match self {
            Self::Validate(f) => (Command::Validate, f),
            Self::Simulate(f) => (Command::Simulate, f),
            Self::Greeks(f) => (Command::Greeks, f),
            Self::Varswap(f) => (Command::Varswap, f),
            Self::Volmodel(f) => (Command::Volmodel, f),
        }
    }
}

/// Defaults, then the config file, then flags.
pub fn resolve(command: Command, flags: &Flags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
            RunConfig::from_toml(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.command = command;
    if let Some(name) = &flags.model {
        cfg.model = ModelConfig::named(name)?;
    }
    if let Some(h) = flags.hurst {
        *cfg.model.hurst_mut() = h;
    }
    if let Some(x) = flags.x {
        match command {
            Command::Varswap => cfg.varswap.x = x,
            Command::Volmodel => cfg.volmodel.x2 = x,
            _ => *cfg.model.x_mut() = x,
        }
    }
    if let Some(mu) = flags.mu {
        cfg.varswap.mu = mu;
        cfg.volmodel.mu = mu;
    }
    if let Some(q) = flags.q {
        cfg.varswap.q = q;
        cfg.volmodel.q = q;
    }
    macro_rules! set {
        ($flag:expr, $slot:expr) => {
            if let Some(v) = $flag.clone() {
                $slot = v;
            }
        };
    }
    set!(flags.n, cfg.grid.n);
    set!(flags.horizon, cfg.grid.horizon);
    set!(flags.paths, cfg.monte_carlo.paths);
    set!(flags.seed, cfg.monte_carlo.seed);
    set!(flags.tol, cfg.tolerances.picard);
    set!(flags.max_iter, cfg.tolerances.max_iter);
    set!(flags.fd_step, cfg.tolerances.fd_rel_step);
    set!(flags.convention, cfg.varswap.convention);
    set!(flags.suite, cfg.suite);
    set!(flags.payoff, cfg.greeks.payoff);
    if flags.workers.is_some() {
        cfg.monte_carlo.workers = flags.workers;
    }
    if flags.output.is_some() {
        cfg.output.report = flags.output.clone();
    }
    if flags.csv.is_some() {
        cfg.output.csv = flags.csv.clone();
    }
    if flags.time.is_some() {
        cfg.greeks.time = flags.time;
    }
    if cfg.monte_carlo.workers.is_none() {
        cfg.monte_carlo.workers = Some(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    }
    cfg.check()?;
    Ok(cfg)
}

fn exit_code(e: &anyhow::Error) -> i32 {
    if e.downcast_ref::<ConfigError>().is_some() {
        return EXIT_CONFIG;
    }
    match e.downcast_ref::<fracmf::Error>() {
        Some(fracmf::Error::InvalidParameter(_)) => EXIT_CONFIG,
        _ => EXIT_FAILED,
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let (command, flags) = cli.command.split();
    let outcome = resolve(command, flags).and_then(|cfg| {
        if flags.dump_config {
            print!("{}", cfg.to_toml().context("serialising config")?);
            return Ok(true);
        }
        let workers = cfg.monte_carlo.workers.unwrap_or(1);
        commands::execute(&cfg, workers)
    });
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_FAILED,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
