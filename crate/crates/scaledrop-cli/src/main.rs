//! Command-line runner: loads an experiment config, applies flag overrides,
//! and executes one command. Exit codes: 0 success, 2 config/usage error,
//! 3 runtime error.

use clap::{Parser, Subcommand};
use scaledrop::config::ExperimentConfig;
use scaledrop::harness::{run_experiment, Command};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "scaledrop",
    about = "Binary neural networks with stochastic scale vectors: training, \
             Monte-Carlo uncertainty, an SOT-MTJ bit model, and a crossbar \
             compute-in-memory simulator",
    version
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for Monte-Carlo passes (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write checkpoint + history.
    Train,
    /// Point-estimate accuracy of a checkpoint (dropout off, scales on).
    Eval,
    /// Monte-Carlo inference: per-input uncertainty records and metrics.
    McEval,
    /// Out-of-distribution detection rates over the configured OOD sets.
    Ood,
    /// Distribution-shift sweep: accuracy and entropy vs corruption level.
    ShiftSweep,
    /// Map the model onto crossbars, check functional equivalence, and
    /// write the energy ledger.
    CimSim,
    /// Calibrate MTJ drive currents and report bitstream quality.
    SpinCalibrate,
}

impl From<&Cmd> for Command {
    fn from(c: &Cmd) -> Command {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Eval => Command::Eval,
            Cmd::McEval => Command::McEval,
            Cmd::Ood => Command::Ood,
            Cmd::ShiftSweep => Command::ShiftSweep,
            Cmd::CimSim => Command::CimSim,
            Cmd::SpinCalibrate => Command::SpinCalibrate,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("scaledrop: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(3);
        }
    }

    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("scaledrop: --config PATH is required");
            return ExitCode::from(2);
        }
    };
    let mut cfg = match ExperimentConfig::from_file(&config_path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("scaledrop: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.experiment.out_dir = out.clone();
    }

    match run_experiment(&cfg, Command::from(&cli.command)) {
        Ok(summary) => {
            println!("{}", summary.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("scaledrop: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
