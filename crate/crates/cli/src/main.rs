//! `kbr <experiment> [--config FILE] [--seed S] [--out DIR] [--paper-scale]`
//!
//! Exit codes: 0 success, 2 configuration or I/O error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use kbr_core::experiments::{run_experiment, Experiment, RunOptions};
use kbr_core::{Exec, KbrError};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ExperimentArg {
    PosteriorGaussian,
    AbcCompare,
    FilterSynthetic,
}

impl From<ExperimentArg> for Experiment {
    fn from(e: ExperimentArg) -> Self {
        match e {
            ExperimentArg::PosteriorGaussian => Experiment::PosteriorGaussian,
            ExperimentArg::AbcCompare => Experiment::AbcCompare,
            ExperimentArg::FilterSynthetic => Experiment::FilterSynthetic,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "kbr", version, about = "Kernel Bayes' rule experiments")]
struct Cli {
    #[arg(value_enum)]
    experiment: ExperimentArg,

    /// TOML config; all keys default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root seed; run i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, default_value = "out")]
    out: PathBuf,

    /// Run counts and test sizes of the original study.
    #[arg(long)]
    paper_scale: bool,

    /// Disable data parallelism.
    #[arg(long)]
    sequential: bool,
}

fn exit_code(e: &KbrError) -> u8 {
    match e {
        KbrError::Numeric { .. } | KbrError::Degenerate(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let text = match &cli.config {
        Some(p) => match std::fs::read_to_string(p) {
            Ok(t) => Some(t),
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", p.display());
                return ExitCode::from(2);
            }
        },
        None => None,
    };
    let opts = RunOptions {
        seed: cli.seed,
        paper_scale: cli.paper_scale,
        out_dir: cli.out.clone(),
        exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel },
    };
    match run_experiment(cli.experiment.into(), text.as_deref(), &opts) {
        Ok(report) => {
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!("config hash {}", report.config_hash);
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
