//! Suite report output: a fixed-schema CSV summary and a JSON variant with
//! per-repetition detail.

use super::{HarnessError, SuiteReport};

pub const REPORT_CSV_HEADER: &str =
    "experiment,avg_distance,sd_distance,avg_loss_pct,avg_delay_ms,avg_jitter_ms,distortion_pct";

/// One row per experiment plus a final baseline row. Fixed six-decimal
/// formatting keeps identical runs byte-identical.
pub fn report_csv(report: &SuiteReport) -> String {
    let mut out = String::from(REPORT_CSV_HEADER);
    out.push('\n');
    for e in &report.experiments {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            e.id, e.avg_distance, e.sd_distance, e.avg_loss_pct, e.avg_delay_ms, e.avg_jitter_ms,
            e.distortion_pct
        ));
    }
    out.push_str(&format!(
        "baseline,{:.6},{:.6},0.000000,0.000000,0.000000,100.000000\n",
        report.baseline.mean_distance, report.baseline.sd_distance
    ));
    out
}

/// The full report, including per-repetition and sweep sub-run detail.
pub fn report_json(report: &SuiteReport) -> Result<String, HarnessError> {
    serde_json::to_string_pretty(report)
        .map_err(|e| HarnessError::Config(format!("report serialization: {e}")))
}
