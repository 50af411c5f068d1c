//! `flops`: analytic cost report for a configured model, with an
//! optional aggregation-depth sweep.

use std::path::PathBuf;

use clap::Args;

use stbln_core::flops::{count_model, sweep_csv, sweep_lambda, FlopsReport};

use crate::config::load_config;
use crate::error::{io_err, Result};

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Run configuration (TOML); only `[network]` is used.
    #[arg(long)]
    pub config: PathBuf,
    /// Write a `lambda,flops,params` sweep over every aggregation
    /// depth of the configured plan to this CSV file.
    #[arg(long)]
    pub sweep: Option<PathBuf>,
}

/// Prints the per-layer cost table and returns the report.
pub fn cmd_flops(args: &FlopsArgs) -> Result<FlopsReport> {
    let run = load_config(&args.config)?;
    let network = run.network.to_network_config()?;
    let report = count_model(&network)?;
    print!("{}", report.render());
    if let Some(path) = &args.sweep {
        let rows = sweep_lambda(&network)?;
        std::fs::write(path, sweep_csv(&rows)).map_err(|e| io_err(path, e))?;
        println!("wrote {}", path.display());
    }
    Ok(report)
}
