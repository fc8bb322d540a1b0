//! Experiment harness for the `milodo` optimizer: dataset generation,
//! multi-stage training, evaluation against the proximal baselines, and
//! property verification, all driven by one TOML config.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod plot;
pub mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use milodo::milodo::DualCoupling;
use milodo::Precision;

use commands::verify::VerifyOptions;
use config::ExperimentConfig;
use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "milodo", version, about = "Train and evaluate learned decentralized optimizers")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the config file.
#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// experiment config (TOML); built-in defaults when omitted
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// worker threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub precision: Option<Precision>,
    /// output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the seeded training and held-out instances
    GenData,
    /// Train through every stage, writing per-stage checkpoints
    Train,
    /// Run the configured methods on the held-out set and write metrics and plots
    Eval,
    /// Check the structural properties of the iteration and its gradient
    Verify {
        /// use the unsymmetrized dual coupling in the conservation check
        #[arg(long, hide = true)]
        break_symmetry: bool,
    },
}

/// Loads the config and applies the command-line overrides.
pub fn resolve_config(global: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(),
    };
    if let Some(s) = global.seed {
        cfg.seed = s;
    }
    if let Some(t) = global.threads {
        cfg.threads = t;
    }
    if let Some(p) = global.precision {
        cfg.precision = p;
    }
    if let Some(o) = &global.out {
        // command-line paths are relative to the working directory
        cfg.out = std::env::current_dir().map(|d| d.join(o)).unwrap_or_else(|_| o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads(threads: usize) -> CliResult<()> {
    // a pool already built in this process (tests) is reused
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    if rayon::current_num_threads() != threads {
        eprintln!("note: using the existing pool of {} threads", rayon::current_num_threads());
    }
    Ok(())
}

/// Executes one command, printing a short summary to stdout.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(&cli.global)?;
    init_threads(cfg.threads)?;
    match &cli.command {
        Command::GenData => {
            let r = data::cmd_gen_data(&cfg)?;
            println!(
                "wrote {} training and {} held-out instances to {} (manifest sha256 {})",
                r.train,
                r.test,
                r.dir.display(),
                r.manifest_sha256
            );
        }
        Command::Train => {
            let r = commands::cmd_train(&cfg)?;
            for (i, rep) in r.reports.iter().enumerate() {
                println!(
                    "stage {}: {} epochs, final loss {}, {} of {} segments non-finite",
                    i + 1,
                    rep.epoch_losses.len(),
                    rep.epoch_losses.last().map_or("n/a".to_string(), |l| format!("{l:.6e}")),
                    rep.nan_segments,
                    rep.segments
                );
            }
            println!("checkpoints in {}", r.checkpoint_dir.display());
        }
        Command::Eval => {
            let r = commands::cmd_eval(&cfg)?;
            for c in &r.curves {
                match c.rows.last() {
                    Some(row) => println!(
                        "{}: iteration {} gap {:.3e} consensus {:.3e}{}",
                        c.label,
                        row.iter,
                        row.gap,
                        row.consensus_error,
                        if c.diverged_runs > 0 { format!(" ({} runs diverged)", c.diverged_runs) } else { String::new() }
                    ),
                    None => println!("{}: diverged at the first iteration", c.label),
                }
            }
            println!("metrics in {}", r.out_dir.join(commands::eval::METRICS_CSV).display());
        }
        Command::Verify { break_symmetry } => {
            let coupling = if *break_symmetry { DualCoupling::Unsymmetrized } else { DualCoupling::Symmetrized };
            let checks = commands::cmd_verify(&cfg, VerifyOptions { coupling })?;
            for c in &checks {
                println!("{}", c.line());
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::Failure(format!("{failed} of {} checks failed", checks.len())));
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps the outcome to an exit code:
/// 0 on success, 1 on a failed check or run, 2 on a configuration error.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
