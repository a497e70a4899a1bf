use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;

use super::DataError;

pub const CASES_HEADER: [&str; 3] = ["date", "region_id", "new_cases"];
pub const MOBILITY_HEADER: [&str; 4] = ["date", "src_region", "dst_region", "weight"];

/// Daily new-case counts, one row per day and one column per region.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseTable {
    pub dates: Vec<NaiveDate>,
    pub regions: Vec<String>,
    /// `counts[day][region]`.
    pub counts: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    pub src: String,
    pub dst: String,
    pub weight: f64,
}

/// Directed daily mobility flows. Pairs absent from a day carry zero flow.
#[derive(Debug, Clone, PartialEq)]
pub struct MobilityTable {
    pub dates: Vec<NaiveDate>,
    /// `flows[k]` belongs to `dates[k]`.
    pub flows: Vec<Vec<Flow>>,
}

impl CaseTable {
    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }
}

impl MobilityTable {
    /// Region identifiers mentioned anywhere in the table, sorted.
    pub fn regions(&self) -> Vec<String> {
        let mut set: Vec<String> = self
            .flows
            .iter()
            .flatten()
            .flat_map(|f| [f.src.clone(), f.dst.clone()])
            .collect();
        set.sort();
        set.dedup();
        set
    }
}

fn open_csv(path: &Path, expected: &[&str]) -> Result<csv::Reader<File>, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| DataError::MalformedRow {
            line: 1,
            reason: e.to_string(),
        })?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != expected {
        return Err(DataError::Header {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: header.join(","),
        });
    }
    Ok(rdr)
}

fn parse_date(raw: &str, line: u64) -> Result<NaiveDate, DataError> {
    NaiveDate::parse_from_str(raw, "%Y-%m-%d").map_err(|_| DataError::DateFormat {
        line,
        value: raw.to_owned(),
    })
}

fn fields(record: &csv::StringRecord, n: usize, line: u64) -> Result<Vec<String>, DataError> {
    if record.len() != n {
        return Err(DataError::MalformedRow {
            line,
            reason: format!("expected {n} fields, found {}", record.len()),
        });
    }
    Ok(record.iter().map(str::to_owned).collect())
}

fn check_contiguous(dates: &[NaiveDate]) -> Result<(), DataError> {
    for pair in dates.windows(2) {
        if pair[1] != pair[0].succ_opt().unwrap_or(pair[0]) {
            return Err(DataError::DateGap {
                after: pair[0],
                next: pair[1],
            });
        }
    }
    Ok(())
}

/// Reads a `date,region_id,new_cases` file.
pub fn load_cases(path: impl AsRef<Path>) -> Result<CaseTable, DataError> {
    let path = path.as_ref();
    let mut rdr = open_csv(path, &CASES_HEADER)?;
    let mut regions: Vec<String> = Vec::new();
    let mut region_idx: HashMap<String, usize> = HashMap::new();
    let mut by_date: BTreeMap<NaiveDate, HashMap<usize, u64>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| DataError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        let f = fields(&rec, 3, line)?;
        let date = parse_date(&f[0], line)?;
        let count: i64 = f[2].parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("new_cases '{}' is not an integer", f[2]),
        })?;
        if count < 0 {
            return Err(DataError::NegativeCount { line, value: count });
        }
        let r = *region_idx.entry(f[1].clone()).or_insert_with(|| {
            regions.push(f[1].clone());
            regions.len() - 1
        });
        if by_date.entry(date).or_default().insert(r, count as u64).is_some() {
            return Err(DataError::DuplicateRow {
                line,
                date,
                region: f[1].clone(),
            });
        }
    }
    if by_date.is_empty() {
        return Err(DataError::Empty(path.to_path_buf()));
    }
    let dates: Vec<NaiveDate> = by_date.keys().copied().collect();
    check_contiguous(&dates)?;
    let mut counts = Vec::with_capacity(dates.len());
    for (date, row) in &by_date {
        let mut out = vec![0u64; regions.len()];
        for (r, name) in regions.iter().enumerate() {
            out[r] = *row.get(&r).ok_or_else(|| DataError::MissingEntry {
                date: *date,
                region: name.clone(),
            })?;
        }
        counts.push(out);
    }
    Ok(CaseTable { dates, regions, counts })
}

/// Reads a `date,src_region,dst_region,weight` file.
pub fn load_mobility(path: impl AsRef<Path>) -> Result<MobilityTable, DataError> {
    let path = path.as_ref();
    let mut rdr = open_csv(path, &MOBILITY_HEADER)?;
    let mut by_date: BTreeMap<NaiveDate, Vec<Flow>> = BTreeMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k as u64 + 2;
        let rec = rec.map_err(|e| DataError::MalformedRow {
            line,
            reason: e.to_string(),
        })?;
        let f = fields(&rec, 4, line)?;
        let date = parse_date(&f[0], line)?;
        let weight: f64 = f[3].parse().map_err(|_| DataError::MalformedRow {
            line,
            reason: format!("weight '{}' is not a number", f[3]),
        })?;
        if !weight.is_finite() {
            return Err(DataError::NonFiniteWeight { line });
        }
        if weight < 0.0 {
            return Err(DataError::NegativeWeight { line, value: weight });
        }
        by_date.entry(date).or_default().push(Flow {
            src: f[1].clone(),
            dst: f[2].clone(),
            weight,
        });
    }
    let (dates, flows) = by_date.into_iter().unzip();
    Ok(MobilityTable { dates, flows })
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_cases(table: &CaseTable, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "{}", CASES_HEADER.join(",")).map_err(io_err(path))?;
    for (date, row) in table.dates.iter().zip(&table.counts) {
        for (region, count) in table.regions.iter().zip(row) {
            writeln!(w, "{},{},{}", date.format("%Y-%m-%d"), region, count).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

pub fn write_mobility(table: &MobilityTable, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let mut w = std::io::BufWriter::new(File::create(path).map_err(io_err(path))?);
    writeln!(w, "{}", MOBILITY_HEADER.join(",")).map_err(io_err(path))?;
    for (date, flows) in table.dates.iter().zip(&table.flows) {
        for f in flows {
            writeln!(w, "{},{},{},{}", date.format("%Y-%m-%d"), f.src, f.dst, f.weight).map_err(io_err(path))?;
        }
    }
    w.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn zero_case_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "c.csv",
            "date,region_id,new_cases\n2020-03-01,A,0\n2020-03-01,B,0\n2020-03-02,A,0\n2020-03-02,B,0\n2020-03-03,A,0\n2020-03-03,B,0\n",
        );
        let t = load_cases(&p).unwrap();
        assert_eq!(t.n_regions(), 2);
        assert_eq!(t.n_days(), 3);
        assert!(t.counts.iter().flatten().all(|&c| c == 0));
    }

    #[test]
    fn case_validation_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let dup = write(&dir, "d.csv", "date,region_id,new_cases\n2020-03-01,A,1\n2020-03-01,A,2\n");
        assert!(matches!(load_cases(&dup), Err(DataError::DuplicateRow { line: 3, .. })));
        let neg = write(&dir, "n.csv", "date,region_id,new_cases\n2020-03-01,A,-4\n");
        assert!(matches!(load_cases(&neg), Err(DataError::NegativeCount { value: -4, .. })));
        let gap = write(&dir, "g.csv", "date,region_id,new_cases\n2020-03-01,A,1\n2020-03-03,A,2\n");
        assert!(matches!(load_cases(&gap), Err(DataError::DateGap { .. })));
        let bad = write(&dir, "b.csv", "date,region_id,new_cases\n2020-03-01,A\n");
        assert!(matches!(load_cases(&bad), Err(DataError::MalformedRow { .. })));
        let hole = write(&dir, "h.csv", "date,region_id,new_cases\n2020-03-01,A,1\n2020-03-01,B,1\n2020-03-02,A,2\n");
        assert!(matches!(load_cases(&hole), Err(DataError::MissingEntry { .. })));
        assert!(matches!(load_cases(dir.path().join("nope.csv")), Err(DataError::MissingFile(_))));
    }

    #[test]
    fn unsorted_case_rows_are_sorted_by_date() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "date,region_id,new_cases\n2020-03-02,A,5\n2020-03-01,A,3\n");
        let t = load_cases(&p).unwrap();
        assert_eq!(t.counts, vec![vec![3], vec![5]]);
    }

    #[test]
    fn zero_flow_file_and_mobility_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "m.csv",
            "date,src_region,dst_region,weight\n2020-03-01,A,B,0\n2020-03-02,A,B,0\n2020-03-03,B,A,0\n",
        );
        let m = load_mobility(&p).unwrap();
        assert_eq!(m.dates.len(), 3);
        assert!(m.flows.iter().flatten().all(|f| f.weight == 0.0));
        let neg = write(&dir, "n.csv", "date,src_region,dst_region,weight\n2020-03-01,A,B,-1\n");
        assert!(matches!(load_mobility(&neg), Err(DataError::NegativeWeight { .. })));
        let date = write(&dir, "f.csv", "date,src_region,dst_region,weight\n03/01/2020,A,B,1\n");
        assert!(matches!(load_mobility(&date), Err(DataError::DateFormat { .. })));
        let bad = write(&dir, "b.csv", "date,src_region,dst_region,weight\n2020-03-01,A,B,x\n");
        assert!(matches!(load_mobility(&bad), Err(DataError::MalformedRow { .. })));
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "c.csv", "day,region,cases\n2020-03-01,A,1\n");
        assert!(matches!(load_cases(&p), Err(DataError::Header { .. })));
    }
}
