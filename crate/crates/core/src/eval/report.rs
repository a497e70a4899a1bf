use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::metrics::MetricReport;
use crate::Error;

pub const REFERENCE_LABEL: &str = "reference, not reproduced";

const REFERENCE_CSV: &str = include_str!("../../data/reference.csv");

/// Published number for a (dataset, horizon, model) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub dataset: String,
    pub horizon: usize,
    pub model: String,
    pub rmse: f64,
    pub mae: f64,
}

pub fn reference_table() -> Vec<ReferenceRow> {
    let mut rdr = csv::Reader::from_reader(REFERENCE_CSV.as_bytes());
    rdr.deserialize().map(|r| r.expect("bundled reference table is well formed")).collect()
}

/// Reference row matching a report, if any; dataset names compare case-insensitively.
pub fn reference(dataset: &str, horizon: usize, model: &str) -> Option<ReferenceRow> {
    reference_table()
        .into_iter()
        .find(|r| r.dataset.eq_ignore_ascii_case(dataset) && r.horizon == horizon && r.model == model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub horizon: usize,
    pub model: String,
    pub region_avg_rmse: f64,
    pub region_avg_mae: f64,
    pub ref_rmse: Option<f64>,
    pub ref_mae: Option<f64>,
}

#[derive(Serialize)]
struct JsonReport<'a> {
    reference_label: &'static str,
    rows: &'a [ReportRow],
    reports: &'a [MetricReport],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
}

/// Writes `report.csv` and `report.json` into `dir`.
pub fn emit_report(reports: &[MetricReport], dir: impl AsRef<Path>) -> Result<ReportFiles, Error> {
    if reports.is_empty() {
        return Err(Error::EmptyReport);
    }
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let rows: Vec<ReportRow> = reports
        .iter()
        .map(|r| {
            let reference = reference(&r.dataset, r.horizon, &r.model);
            ReportRow {
                dataset: r.dataset.clone(),
                horizon: r.horizon,
                model: r.model.clone(),
                region_avg_rmse: r.region_avg_rmse,
                region_avg_mae: r.region_avg_mae,
                ref_rmse: reference.as_ref().map(|x| x.rmse),
                ref_mae: reference.as_ref().map(|x| x.mae),
            }
        })
        .collect();

    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| csv_error(&csv_path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(&csv_path, e))?;
    }
    w.flush().map_err(Error::io(&csv_path))?;

    let json_path = dir.join("report.json");
    let body = serde_json::to_string_pretty(&JsonReport {
        reference_label: REFERENCE_LABEL,
        rows: &rows,
        reports,
    })?;
    std::fs::write(&json_path, body).map_err(Error::io(&json_path))?;
    Ok(ReportFiles {
        csv: csv_path,
        json: json_path,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io {
            path: path.to_path_buf(),
            source,
        },
        other => Error::Checkpoint(format!("{}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_lookups() {
        let r = reference("England", 3, "full").unwrap();
        assert_eq!((r.rmse, r.mae), (5.41, 3.83));
        assert_eq!(reference("spain", 14, "full").unwrap().rmse, 56.85);
        assert!(reference("synthetic", 3, "full").is_none());
    }

    #[test]
    fn empty_report_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], dir.path()), Err(Error::EmptyReport)));
    }
}
