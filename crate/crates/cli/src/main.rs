//! `hsd`: cell-formula relaxation, hierarchical energies and approximating
//! sequences from a single JSON configuration.

mod commands;
mod config;
mod output;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use hsd::hierarchy::DensityCache;
use thiserror::Error;

use crate::commands::Context;
use crate::config::{ExperimentConfig, Overrides};
use crate::output::{to_json_string, Artifacts, TOOL, VERSION};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl From<hsd::Error> for CliError {
    fn from(e: hsd::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Runtime(_) => "runtime",
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "hsd",
    version,
    about = "Relaxation and approximation experiments for hierarchical structured deformations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic choice.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Density cache file (loaded when present, saved on success).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Solver feasibility tolerance.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Relaxed bulk density over a list of (A, B).
    RelaxBulk,
    /// Relaxed surface density over a list of (λ, ν).
    RelaxSurface,
    /// Stage-k densities at sampled arguments, compared to the closed form when it applies.
    Recurse,
    /// Energy of a hierarchical deformation read from file.
    Energy,
    /// Approximating sequence with convergence and total-variation reports.
    Approximate,
    /// Sampling-based check of the density class.
    CheckClass,
    /// The closed-form trace example end to end.
    VerifyExample,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::RelaxBulk => "relax-bulk",
            Command::RelaxSurface => "relax-surface",
            Command::Recurse => "recurse",
            Command::Energy => "energy",
            Command::Approximate => "approximate",
            Command::CheckClass => "check-class",
            Command::VerifyExample => "verify-example",
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let overrides = Overrides {
        seed: cli.seed,
        cache: cli.cache.clone(),
        out: cli.out.clone(),
        threads: cli.threads,
        tolerance: cli.tolerance,
    };
    let (cfg, base) = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let cache = match &cfg.cache {
        Some(path) => DensityCache::load(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => DensityCache::new(),
    };
    let hash = cfg.hash();
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("hsd-out"));
    let ctx = Context {
        cfg,
        base,
        hash,
        cache: Arc::new(cache),
    };
    let mut art = Artifacts::new(&out, cli.command.name(), &ctx.hash)?;
    let outcome = match cli.command {
        Command::RelaxBulk => commands::relax_bulk(&ctx, &mut art),
        Command::RelaxSurface => commands::relax_surface(&ctx, &mut art),
        Command::Recurse => commands::recurse(&ctx, &mut art),
        Command::Energy => commands::energy(&ctx, &mut art),
        Command::Approximate => commands::approximate(&ctx, &mut art),
        Command::CheckClass => commands::check_class(&ctx, &mut art),
        Command::VerifyExample => commands::verify_example(&ctx, &mut art),
    }?;
    if let Some(path) = &ctx.cfg.cache {
        ctx.cache.save(path)?;
    }
    // a closed pipe on stdout is not an error of the run
    let mut stdout = std::io::stdout().lock();
    let _ = writeln!(stdout, "{} {}: {}", TOOL, cli.command.name(), outcome.summary);
    if outcome.unconverged > 0 {
        let _ = writeln!(stdout, "unconverged: {} (flagged in results)", outcome.unconverged);
    }
    for p in art.written() {
        let _ = writeln!(stdout, "wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let doc = serde_json::json!({
                "tool": TOOL,
                "version": VERSION,
                "command": cli.command.name(),
                "error": {"kind": e.kind(), "message": e.to_string()},
            });
            let _ = write!(std::io::stdout().lock(), "{}", to_json_string(&doc));
            ExitCode::from(e.exit_code())
        }
    }
}
