//! `gradcheck`: run the finite-difference gradient suite and report
//! each case; any failure exits with the numerical-failure status.

use clap::Args;

use stbln_core::fdcheck::{standard_suite, FdReport};

use crate::error::{CliError, Result};

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seed for the random probe directions.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Runs every case, printing one line per case, and fails if any case
/// exceeds its tolerance.
pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<Vec<FdReport>> {
    let reports = standard_suite(args.seed)?;
    let mut failures = 0usize;
    for report in &reports {
        let ok = report.max_rel_err <= report.tol;
        if !ok {
            failures += 1;
        }
        println!(
            "{} {:<28} rel_err {:.3e}  tol {:.0e}  ({} derivatives)",
            if ok { "ok  " } else { "FAIL" },
            report.name,
            report.max_rel_err,
            report.tol,
            report.checked
        );
    }
    if failures > 0 {
        return Err(CliError::Numeric(format!(
            "{failures} of {} gradient cases exceeded tolerance",
            reports.len()
        )));
    }
    println!("all {} gradient cases passed", reports.len());
    Ok(reports)
}
