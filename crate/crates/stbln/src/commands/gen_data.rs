//! `gen-data`: materialize the configured synthetic dataset as binary
//! train/test files.

use std::path::PathBuf;

use clap::Args;

use crate::commands::resolve_data;
use crate::config::{load_config, RunConfig};
use crate::dataset::write_dataset;
use crate::error::{io_err, CliError, Result};

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Run configuration (TOML); only `[data]` and `[graph]` are used.
    /// Defaults to the built-in configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory for `train.stbn` and `test.stbn`.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed from the config file.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<()> {
    let run = match &args.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if !run.data.synthetic {
        return Err(CliError::Invalid(String::from(
            "data.synthetic: gen-data needs a synthetic data section, but \
             this config points at dataset files",
        )));
    }
    let seed = args.seed.unwrap_or(run.train.seed);
    let template = run.graph.load()?;
    let (train_set, test_set) = resolve_data(&run, &template, seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    let train_path = args.out.join("train.stbn");
    let test_path = args.out.join("test.stbn");
    write_dataset(&train_path, &train_set)?;
    write_dataset(&test_path, &test_set)?;
    println!(
        "wrote {} ({} samples) and {} ({} samples)",
        train_path.display(),
        train_set.len(),
        test_path.display(),
        test_set.len()
    );
    Ok(())
}
