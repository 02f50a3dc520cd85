//! CSV emission with fixed header rows: evaluation reports, solver
//! diagnostics, and training-loss logs.

use std::path::Path;

use varreg_core::metrics::MetricsReport;
use varreg_core::solver::SolveDiagnostics;

use crate::error::{CliError, Result};

pub const METRICS_HEADER: &str =
    "label,dice,hausdorff_mm,neg_jacobian_pct,mean_grad_jacobian,mae";
pub const DIAG_HEADER: &str = "level,warp,iter,splitting_energy,data_energy,max_disp";
pub const TRAIN_LOG_HEADER: &str = "iter,loss";

/// One row per label; the field-level statistics repeat on every row.
pub fn metrics_csv(report: &MetricsReport) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for (i, &label) in report.labels.iter().enumerate() {
        out.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            report.dice[i],
            report.hausdorff_mm[i],
            report.neg_jacobian_pct,
            report.mean_grad_jacobian,
            report.mae
        ));
    }
    out
}

pub fn diag_csv(diag: &SolveDiagnostics) -> String {
    let mut out = String::from(DIAG_HEADER);
    out.push('\n');
    for r in &diag.records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.level, r.warp, r.iter, r.splitting_energy, r.data_energy, r.max_disp
        ));
    }
    out
}

pub fn train_log_csv(history: &[f64]) -> String {
    let mut out = String::from(TRAIN_LOG_HEADER);
    out.push('\n');
    for (i, loss) in history.iter().enumerate() {
        out.push_str(&format!("{i},{loss}\n"));
    }
    out
}

pub fn write_csv(path: &Path, content: &str) -> Result<()> {
    crate::atomic_write(path, content.as_bytes()).map_err(|e| CliError::io(path, e))
}
