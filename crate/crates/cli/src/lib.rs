//! Experiment pipeline behind the `cpsca` binary: configuration, run
//! directories, report tables and ablation sweeps.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod sweep;

use std::path::{Path, PathBuf};

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

/// Builds the comparison table from evaluated run directories and writes
/// `report.csv` and `report.txt` into `out`.
pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<Vec<report::Row>> {
    if runs.is_empty() {
        return Err(CliError::Usage("report needs at least one run directory".into()));
    }
    let summaries = runs.iter().map(|r| pipeline::read_summary(r)).collect::<Result<Vec<_>>>()?;
    let rows = report::rows(&summaries);
    report::write_report(out, &rows)?;
    Ok(rows)
}
