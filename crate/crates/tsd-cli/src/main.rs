//! `tsd`: batch driver for the diffusion toolkit.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Ctx;
use crate::config::RunConfig;
use crate::output::{Meta, Writer};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error(transparent)]
    Lib(#[from] tsd::Error),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Lib(e) if e.is_validation() => 2,
            _ => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "tsd", version, about = "Global diffusion on a tight three-sphere")]
struct Cli {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads, overriding the config.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sampling seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Integrate one orbit and record the energy drift.
    Simulate,
    /// Section scatter, rotation numbers, circle scan and instability zones.
    Section,
    /// Melnikov potential curves, critical times and coverage.
    Melnikov,
    /// Direct scattering shifts against the first-order prediction.
    Scattering,
    /// Conley-Zehnder indices of the critical circles.
    Cz,
    /// Build a chain of correctly aligned windows.
    Windows,
    /// Windows plus a shadowing witness and its visit log.
    Diffuse,
    /// Scaling in eps of splitting, shifts and residuals.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Section => "section",
            Command::Melnikov => "melnikov",
            Command::Scattering => "scattering",
            Command::Cz => "cz",
            Command::Windows => "windows",
            Command::Diffuse => "diffuse",
            Command::Sweep => "sweep",
        }
    }
}

fn tolerances(cmd: Command, cfg: &RunConfig) -> String {
    match cmd {
        Command::Simulate => format!("rel={:e} abs={:e}", cfg.simulate.rel_tol, cfg.simulate.abs_tol),
        Command::Section => format!("rel={:e} abs={:e}", cfg.section.rel_tol, cfg.section.abs_tol),
        Command::Melnikov => format!("quad={:e}", cfg.melnikov.quad_tol),
        Command::Scattering => shoot_tol(&cfg.scattering.shoot),
        Command::Cz => format!("gap={:e} snap={:e}", tsd::czindex::NONDEGENERACY_GAP, tsd::czindex::INTEGER_SNAP),
        Command::Windows | Command::Diffuse => {
            format!("margin={:e} {}", cfg.windows.margin_tol, shoot_tol(&cfg.windows.shoot))
        }
        Command::Sweep => shoot_tol(&cfg.sweep.shoot),
    }
}

fn shoot_tol(s: &tsd::manifold::ShootConfig) -> String {
    format!("rel={:e} abs={:e} match={:e}", s.rel_tol, s.abs_tol, s.match_tol)
}

fn run(cli: &Cli) -> Result<(), (Option<PathBuf>, CliError)> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), std::env::vars()).map_err(|e| (cli.out.clone(), e))?;
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cfg.out.clone();
    let fail = |e: CliError| (Some(out.clone()), e);
    cfg.validate().map_err(fail)?;
    // A second initialization in the same process is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();

    let ctx = Ctx { cfg: &cfg, params: cfg.params().map_err(fail)?, pert: cfg.pert().map_err(fail)?, verbose: cli.verbose };
    let meta = Meta::new(cli.command.name(), &cfg.canonical_json(), tolerances(cli.command, &cfg));
    let mut w = Writer::new(&out, meta).map_err(fail)?;
    let r = match cli.command {
        Command::Simulate => commands::simulate(&ctx, &mut w),
        Command::Section => commands::section_cmd(&ctx, &mut w),
        Command::Melnikov => commands::melnikov_cmd(&ctx, &mut w),
        Command::Scattering => commands::scattering_cmd(&ctx, &mut w),
        Command::Cz => commands::cz_cmd(&ctx, &mut w),
        Command::Windows => commands::windows_cmd(&ctx, &mut w),
        Command::Diffuse => commands::diffuse(&ctx, &mut w),
        Command::Sweep => commands::sweep(&ctx, &mut w),
    };
    r.map_err(fail)?;
    if cli.verbose {
        for p in &w.written {
            eprintln!("tsd: wrote {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err((dir, e)) => {
            eprintln!("tsd {}: {e}", cli.command.name());
            if let Some(d) = dir {
                output::mark_failed(&d, &e);
            }
            ExitCode::from(e.exit_code())
        }
    }
}
