//! The `tcm` command-line tool.
//!
//! Exit codes: 0 ok, 1 verification or runtime failure, 2 config error,
//! 3 missing prerequisite, 4 data or checkpoint mismatch.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod verify;

use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

pub use error::{exit, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "tcm",
    version,
    about = "Transported inference with causal mechanisms on synthetic SCMs"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LevelArg {
    Quick,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    TruncatedSvd,
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample an SCM and write source/target datasets.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train mechanisms (stage 1), the proxy model (stage 2), or both.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
    },
    /// Predict target labels with a trained checkpoint.
    Infer {
        /// Directory holding `proxy.ckpt.json`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV.
        #[arg(long)]
        data: PathBuf,
        /// Predictions CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant suites; `full` adds the end-to-end experiment.
    Verify {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum, default_value = "quick")]
        level: LevelArg,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
    /// Merge run outputs into one CSV and text table.
    Report {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Dataset directory, needed to evaluate `predictions.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output CSV; the text table goes next to it with a `.txt` extension.
        #[arg(long)]
        out: PathBuf,
    },
    /// TCM, both baselines and the oracle on one generated world.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// TCM over the configured k list and seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(args: &ConfigArgs) -> CliResult<tcm_core::ExperimentConfig> {
    data::load_config(args.config.as_deref(), args.seed)
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Gen { cfg, out } => pipeline::cmd_gen(&config(&cfg)?, &out),
        Command::Train {
            cfg,
            data,
            out,
            stage,
        } => {
            let stage = match stage {
                StageArg::One => pipeline::Stage::One,
                StageArg::Two => pipeline::Stage::Two,
                StageArg::All => pipeline::Stage::All,
            };
            pipeline::cmd_train(&config(&cfg)?, &data, &out, stage)
        }
        Command::Infer {
            checkpoint,
            data,
            out,
        } => pipeline::cmd_infer(&checkpoint, &data, &out),
        Command::Verify {
            cfg,
            level,
            out,
            inject_fault,
        } => {
            let level = match level {
                LevelArg::Quick => verify::Level::Quick,
                LevelArg::Full => verify::Level::Full,
            };
            let fault = inject_fault.map(|f| match f {
                FaultArg::TruncatedSvd => verify::Fault::TruncatedSvd,
            });
            verify::cmd_verify(&config(&cfg)?, level, fault, out.as_deref())
        }
        Command::Report {
            runs,
            data,
            cfg,
            out,
        } => report::cmd_report(&runs, data.as_deref(), &config(&cfg)?, &out),
        Command::Experiment { cfg, out } => pipeline::cmd_experiment(&config(&cfg)?, &out),
        Command::Ablate { cfg, out } => pipeline::cmd_ablate(&config(&cfg)?, &out),
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                exit::CONFIG
            } else {
                exit::OK
            };
        }
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}
