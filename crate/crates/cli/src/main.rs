//! `dtsmooth`: phantom generation, noise, fitting, smoothing, evaluation
//! and verification suites.
//!
//! Exit codes: 0 success, 1 a check or fit-failure limit failed, 2 usage or
//! configuration error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "dtsmooth", version, about = "Diffusion tensor smoothing experiments")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML experiment config; built-in defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; replaces the config's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    /// Config override `section.key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory. Precedence: this flag, the config's `output.dir`,
    /// `$DTSMOOTH_OUT`, then `./out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom field and its region mask.
    Phantom,
    /// Write noisy data per seed: DWI signals (Rician) or a tensor field (spectral).
    Noise,
    /// Fit tensors per seed and write the field plus per-voxel diagnostics.
    Fit {
        /// DWI CSV to fit instead of simulating one (single seed).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the smoothing grid per seed and write every smoothed field.
    Smooth {
        /// Tensor field CSV to smooth instead of simulating one (single seed).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Full pipeline with region summaries, plot data and a JSON report.
    Run,
    /// Perturbation, regression and Rician verification suites.
    Verify {
        /// Restrict to some suites.
        #[arg(long, value_enum)]
        suite: Vec<commands::Suite>,
    },
    /// Isotropic weight profiles at the reference voxel.
    Weights,
}

pub enum Failure {
    Usage(String),
    Check(String),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = commands::Context::new(&cli.common).and_then(|ctx| match cli.command {
        Command::Phantom => ctx.phantom(),
        Command::Noise => ctx.noise(),
        Command::Fit { input } => ctx.fit(input.as_deref()),
        Command::Smooth { input } => ctx.smooth(input.as_deref()),
        Command::Run => ctx.run(),
        Command::Verify { suite } => ctx.verify(&suite),
        Command::Weights => ctx.weights(),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("dtsmooth: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("dtsmooth: {msg}");
            ExitCode::from(2)
        }
    }
}
