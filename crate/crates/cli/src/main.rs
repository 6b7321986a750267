//! `clipmap` binary: compress a dual-encoder by learning width/depth maps,
//! then retrain the compressed student with distillation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use clipmap::commands;
use clipmap::config::RunConfig;
use clipmap::CliResult;

#[derive(Parser)]
#[command(name = "clipmap", about = "dual-encoder compression pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration file (flat `key = value`; empty file = defaults).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for checkpoints and CSV logs.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Assert fully-deterministic execution (always on; flag documents intent).
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher from scratch on the synthetic task.
    PretrainTeacher {
        #[command(flatten)]
        common: Common,
    },
    /// Learn compression maps against a frozen teacher; emit the inherited student.
    Map {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint.
        #[arg(long)]
        teacher: PathBuf,
    },
    /// Retrain a student with λ-weighted distillation from the teacher.
    Retrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
        /// Student checkpoint to start from (e.g. `student_init.ckpt`).
        #[arg(long)]
        student: PathBuf,
    },
    /// Score a checkpoint: retrieval recall, zero-shot accuracy, param counts.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate (teacher or student).
        #[arg(long)]
        student: PathBuf,
    },
    /// Print mapping-matrix statistics and export heatmap CSVs.
    InspectMaps {
        #[command(flatten)]
        common: Common,
        /// Maps checkpoint produced by `map`.
        #[arg(long)]
        maps: PathBuf,
    },
    /// Rank initialization schemes under identical mapping budgets.
    CompareInit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        teacher: PathBuf,
    },
}

fn load(common: &Common) -> CliResult<RunConfig> {
    RunConfig::load(&common.config, common.seed)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::PretrainTeacher { common } => {
            commands::cmd_pretrain_teacher(&load(&common)?, &common.out)?;
        }
        Command::Map { common, teacher } => {
            commands::cmd_map(&load(&common)?, &teacher, &common.out)?;
        }
        Command::Retrain { common, teacher, student } => {
            commands::cmd_retrain(&load(&common)?, &teacher, &student, &common.out)?;
        }
        Command::Eval { common, student } => {
            commands::cmd_eval(&load(&common)?, &student, &common.out)?;
        }
        Command::InspectMaps { common, maps } => {
            // config is parsed for validation even though maps are self-describing
            load(&common)?;
            commands::cmd_inspect_maps(&maps, &common.out)?;
        }
        Command::CompareInit { common, teacher } => {
            commands::cmd_compare_init(&load(&common)?, &teacher, &common.out)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    clipmap::tune_allocator();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
