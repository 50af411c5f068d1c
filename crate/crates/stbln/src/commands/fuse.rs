//! `fuse`: combine two per-sample score files by adding softmax rows
//! and print the fused accuracy against a dataset's labels.

use std::path::PathBuf;

use clap::Args;

use stbln_core::network::fuse_two_stream;

use crate::dataset::read_dataset;
use crate::error::{CliError, Result};
use crate::scores::{accuracy, read_scores};

#[derive(Debug, Args)]
pub struct FuseArgs {
    /// First score file (CSV from `eval --scores`).
    #[arg(long)]
    pub a: PathBuf,
    /// Second score file.
    #[arg(long)]
    pub b: PathBuf,
    /// Dataset file providing the ground-truth labels.
    #[arg(long)]
    pub labels: PathBuf,
}

/// Returns the fused accuracy.
pub fn cmd_fuse(args: &FuseArgs) -> Result<f64> {
    let scores_a = read_scores(&args.a)?;
    let scores_b = read_scores(&args.b)?;
    if scores_a.shape() != scores_b.shape() {
        return Err(CliError::Invalid(format!(
            "score shapes differ: {} has {:?}, {} has {:?}",
            args.a.display(),
            scores_a.shape(),
            args.b.display(),
            scores_b.shape()
        )));
    }
    let dataset = read_dataset(&args.labels)?;
    if dataset.len() != scores_a.shape()[0] {
        return Err(CliError::Invalid(format!(
            "{} labels but {} score rows",
            dataset.len(),
            scores_a.shape()[0]
        )));
    }
    if dataset.num_classes != scores_a.shape()[1] {
        return Err(CliError::Invalid(format!(
            "{} classes in the dataset but {} score columns",
            dataset.num_classes,
            scores_a.shape()[1]
        )));
    }
    let predictions = fuse_two_stream(&scores_a, &scores_b)?;
    let fused = accuracy(&predictions, &dataset.labels)?;
    println!("fused accuracy {fused}");
    Ok(fused)
}
