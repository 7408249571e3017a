use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use smug_core::reconstructors::Method;
use smug_core::robustness::SweepKind;
use smug_harness::config::ExperimentConfig;
use smug_harness::experiment::{self, Workspace};
use smug_harness::{HarnessError, Result};

/// Smoothed unrolled MRI reconstruction experiments.
#[derive(Parser)]
#[command(name = "smug", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config and $SMUG_OUTPUT_ROOT.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test phantoms.
    GenData,
    /// Train the denoiser alone.
    Pretrain,
    /// Fine-tune a reconstruction method end to end.
    Finetune {
        /// modl, rs-e2e, smug, wsmug, istanet, istanet-smug or istanet-wsmug.
        #[arg(long)]
        mode: Method,
    },
    /// Clean, noisy and PGD metrics for the configured methods.
    Eval,
    /// PGD objective histories for one method.
    Attack {
        #[arg(long)]
        mode: Method,
    },
    /// Sweep one evaluation parameter.
    Sweep {
        /// epsilon, sigma, accel, unroll_steps or mc_samples.
        #[arg(long)]
        kind: SweepKind,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Audit the certified robustness bound on the smug checkpoint.
    BoundCheck,
    /// Aggregate CSVs into summary tables.
    Report {
        /// Directory to scan; defaults to the output directory.
        dir: Option<PathBuf>,
        /// Combine files produced by different configs.
        #[arg(long)]
        allow_mixed: bool,
    },
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Workspace::resolve(cfg, cli.output.clone())
}

fn run(cli: Cli) -> Result<()> {
    let report = |m: smug_harness::io::RunManifest, root: &std::path::Path| {
        for o in &m.outputs {
            println!("{}", root.join(&o.path).display());
        }
    };
    match &cli.command {
        Command::Report { dir, allow_mixed } => {
            let dir = match dir {
                Some(d) => d.clone(),
                None => workspace(&cli)?.root,
            };
            let m = experiment::run_report(&dir, *allow_mixed)?;
            report(m, &dir);
        }
        cmd => {
            let ws = workspace(&cli)?;
            let m = match cmd {
                Command::GenData => experiment::gen_data(&ws)?,
                Command::Pretrain => experiment::run_pretrain(&ws)?,
                Command::Finetune { mode } => experiment::run_finetune(&ws, *mode)?,
                Command::Eval => experiment::run_eval(&ws)?.1,
                Command::Attack { mode } => experiment::run_attack(&ws, *mode)?,
                Command::Sweep { kind, grid } => experiment::run_sweep(&ws, *kind, grid)?.1,
                Command::BoundCheck => {
                    let (check, m) = experiment::run_bound_check(&ws)?;
                    eprintln!("bound holds: {}", check.holds());
                    m
                }
                Command::Report { .. } => unreachable!(),
            };
            report(m, &ws.root);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                HarnessError::Config(_) | HarnessError::Usage(_) | HarnessError::Toml(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
