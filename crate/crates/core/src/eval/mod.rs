//! Metrics, naive baselines, ablation runs and report files.

mod ablation;
mod baselines;
mod metrics;
mod report;

pub use ablation::{run_ablation, AblationSetup};
pub use baselines::{baseline_predict, baseline_series, BaselineKind};
pub use metrics::{evaluate_predictions, mae, rmse, MetricReport, RegionMetrics};
pub use report::{emit_report, reference, reference_table, ReferenceRow, ReportFiles, ReportRow, REFERENCE_LABEL};
