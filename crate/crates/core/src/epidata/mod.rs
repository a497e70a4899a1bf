//! Ingestion, validation, windowing, splitting and synthesis of
//! spatio-temporal epidemic datasets.

mod dataset;
mod split;
mod synth;
mod tables;

use std::path::PathBuf;

use chrono::NaiveDate;

pub use dataset::{build_dataset, threshold_adjacency, window_features, DatasetOptions, EpidemicDataset, Normalization};
pub use split::{split_dataset, DataSplit, SplitSpec};
pub use synth::{simulate_sir, synth_sir, Compartments, SirParams, SirSimulation};
pub use tables::{
    load_cases, load_mobility, write_cases, write_mobility, CaseTable, Flow, MobilityTable, CASES_HEADER,
    MOBILITY_HEADER,
};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: expected header '{expected}', found '{found}'")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{0}: no data rows")]
    Empty(PathBuf),
    #[error("line {line}: malformed row ({reason})")]
    MalformedRow { line: u64, reason: String },
    #[error("line {line}: negative case count {value}")]
    NegativeCount { line: u64, value: i64 },
    #[error("line {line}: negative mobility weight {value}")]
    NegativeWeight { line: u64, value: f64 },
    #[error("line {line}: non-finite mobility weight")]
    NonFiniteWeight { line: u64 },
    #[error("line {line}: '{value}' is not an ISO-8601 date (YYYY-MM-DD)")]
    DateFormat { line: u64, value: String },
    #[error("line {line}: duplicate row for ({date}, {region})")]
    DuplicateRow { line: u64, date: NaiveDate, region: String },
    #[error("dates jump from {after} to {next}; every calendar day must be present")]
    DateGap { after: NaiveDate, next: NaiveDate },
    #[error("no count for region {region} on {date}")]
    MissingEntry { date: NaiveDate, region: String },
    #[error("case and mobility tables share no dates")]
    EmptyOverlap,
    #[error("mobility references region '{0}' absent from the case table")]
    RegionMismatch(String),
    #[error("window length must be at least 1, got {0}")]
    InvalidWindow(usize),
    #[error("adjacency threshold must be finite and non-negative, got {0}")]
    InvalidEpsilon(f64),
    #[error("split test={test_len} val={val_len} does not fit {n_days} days")]
    InvalidSplit { test_len: usize, val_len: usize, n_days: usize },
    #[error("invalid SIR parameters: {0}")]
    InvalidSirParams(String),
}
