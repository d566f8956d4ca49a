//! `binlt` command line: dataset derivation, teacher pretraining and
//! calibration, distillation, the from-scratch baseline, evaluation,
//! weight-norm and gain reports, and step-cost profiling.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, bad config),
//! 2 runtime error.

mod cmds;

use binlt_core::alloc::CountingAlloc;
use binlt_core::config::TrainConfig;
use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

// counts allocations so `profile` can report a deterministic peak
#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

#[derive(Parser, Debug)]
#[command(name = "binlt", version, about = "1-bit network training on long-tailed data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Debug, Clone)]
struct CommonArgs {
    /// Run configuration file (key = value lines); defaults apply if omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Derive a long-tailed training set (plus balanced test/pretrain splits)
    DeriveLt {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Pretrain the float teacher on balanced data, then freeze its encoder
    PretrainTeacher {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory produced by derive-lt (reads pretrain.cndk)
        #[arg(long)]
        data: PathBuf,
    },
    /// Train the teacher's matching convs + classifier on the LT data
    Calibrate {
        #[command(flatten)]
        common: CommonArgs,
        /// Frozen teacher checkpoint from pretrain-teacher
        #[arg(long)]
        teacher: PathBuf,
        /// Directory produced by derive-lt
        #[arg(long)]
        data: PathBuf,
    },
    /// Adversarially balanced distillation into the binary network
    Distill {
        #[command(flatten)]
        common: CommonArgs,
        /// Calibrated teacher checkpoint
        #[arg(long)]
        teacher: PathBuf,
        /// Directory produced by derive-lt
        #[arg(long)]
        data: PathBuf,
        /// Resume from an epoch checkpoint written by a previous run
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Plain cross-entropy baseline on the LT data
    TrainScratch {
        #[command(flatten)]
        common: CommonArgs,
        /// Directory produced by derive-lt
        #[arg(long)]
        data: PathBuf,
    },
    /// Per-class / head-medium-tail accuracy of a checkpoint on the test set
    Evaluate {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint (binary or teacher)
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory produced by derive-lt (reads test.cndk + manifest.json)
        #[arg(long)]
        data: PathBuf,
    },
    /// Classifier weight/bias norm profile of a checkpoint
    Norms {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Manifest supplying the head-to-tail class order (identity if omitted)
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Per-class accuracy gains of one evaluation report over another
    Gains {
        #[command(flatten)]
        common: CommonArgs,
        /// report.json of the distilled model
        #[arg(long)]
        candle: PathBuf,
        /// report.json of the baseline
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Step-time and peak-memory comparison of the resolution variants
    Profile {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn main() -> ExitCode {
    let cmd = Cli::command().after_help(TrainConfig::describe());
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match cmds::run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
