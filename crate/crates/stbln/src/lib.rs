//! Command-line front end over the spatio-temporal graph network
//! library: training, evaluation, cost reporting, gradient checking,
//! dataset generation and two-stream score fusion, plus the file
//! formats these commands share.
//!
//! Exit codes: `0` success, `1` usage errors, `2` invalid configs or
//! files, `3` numerical failures.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod scores;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use crate::commands::{
    cmd_eval, cmd_flops, cmd_fuse, cmd_gen_data, cmd_gradcheck, cmd_train, EvalArgs,
    FlopsArgs, FuseArgs, GenDataArgs, GradcheckArgs, TrainArgs,
};

#[derive(Debug, Parser)]
#[command(
    name = "stbln",
    about = "Skeleton-sequence classifier: train, evaluate and analyze \
             spatio-temporal graph models"
)]
struct Cli {
    /// Print the default run configuration as TOML and exit.
    #[arg(long)]
    dump_defaults: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Report analytic FLOPs and parameter counts.
    Flops(FlopsArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Generate synthetic train/test dataset files.
    GenData(GenDataArgs),
    /// Fuse two score files and report the fused accuracy.
    Fuse(FuseArgs),
}

/// Parses the process arguments, runs the selected command, and returns
/// the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own message; help and version displays
            // are successes, everything else is a usage error.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    if cli.dump_defaults {
        print!("{}", config::default_toml());
        return 0;
    }
    let Some(command) = cli.command else {
        eprintln!("usage error: a subcommand is required (try --help)");
        return 1;
    };
    let result = match command {
        Command::Train(args) => cmd_train(&args).map(|_| ()),
        Command::Eval(args) => cmd_eval(&args).map(|_| ()),
        Command::Flops(args) => cmd_flops(&args).map(|_| ()),
        Command::Gradcheck(args) => cmd_gradcheck(&args).map(|_| ()),
        Command::GenData(args) => cmd_gen_data(&args),
        Command::Fuse(args) => cmd_fuse(&args).map(|_| ()),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
