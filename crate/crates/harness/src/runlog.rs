//! CSV persistence for run logs and pretraining loss curves.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! written file parses back to bit-identical values. `NaN` marks a metric
//! with nothing to report.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use finetune::RunLogRow;
use thiserror::Error;

pub const RUNLOG_HEADER: [&str; 9] = [
    "iteration",
    "reward_queries",
    "mean_train_reward",
    "eval_seen_reward",
    "eval_unseen_reward",
    "cross_reward",
    "diversity",
    "clip_fraction",
    "wall_ms",
];

pub const LOSSCURVE_HEADER: [&str; 2] = ["step", "loss"];

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("header mismatch: expected {expected:?}, got {got:?}")]
    Header { expected: Vec<String>, got: Vec<String> },
    #[error("row {row}, column {column}: cannot parse {value:?}")]
    Field { row: usize, column: &'static str, value: String },
    #[error("row {row}: reward_queries {got} does not increase past {previous}")]
    NotIncreasing { row: usize, previous: u64, got: u64 },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fields(row: &RunLogRow) -> [String; 9] {
    [
        row.iteration.to_string(),
        row.reward_queries.to_string(),
        row.mean_train_reward.to_string(),
        row.eval_seen_reward.to_string(),
        row.eval_unseen_reward.to_string(),
        row.cross_reward.to_string(),
        row.diversity.to_string(),
        row.clip_fraction.to_string(),
        row.wall_ms.to_string(),
    ]
}

/// Appends rows to a run log as they arrive; each row is flushed.
pub struct RunLogWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl RunLogWriter<File> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, CsvError> {
        Self::new(File::create(path)?)
    }
}

impl<W: Write> RunLogWriter<W> {
    pub fn new(sink: W) -> Result<Self, CsvError> {
        let mut inner = csv::Writer::from_writer(sink);
        inner.write_record(RUNLOG_HEADER)?;
        inner.flush()?;
        Ok(Self { inner })
    }

    pub fn append(&mut self, row: &RunLogRow) -> Result<(), CsvError> {
        self.inner.write_record(fields(row))?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn write_runlog(rows: &[RunLogRow]) -> Result<String, CsvError> {
    let mut w = RunLogWriter::new(Vec::new())?;
    for r in rows {
        w.append(r)?;
    }
    let bytes = w.inner.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

fn check_header(reader: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<(), CsvError> {
    let got: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if got != expected {
        return Err(CsvError::Header {
            expected: expected.iter().map(|s| s.to_string()).collect(),
            got,
        });
    }
    Ok(())
}

fn field<T: std::str::FromStr>(record: &csv::StringRecord, row: usize, i: usize, columns: &[&'static str]) -> Result<T, CsvError> {
    let value = record.get(i).unwrap_or("");
    value.parse().map_err(|_| CsvError::Field {
        row,
        column: columns[i],
        value: value.to_string(),
    })
}

/// Parses a run log and checks that reward queries strictly increase.
pub fn parse_runlog(text: &str) -> Result<Vec<RunLogRow>, CsvError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut reader, &RUNLOG_HEADER)?;
    let mut rows: Vec<RunLogRow> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let f = |i| field::<f64>(&record, row, i, &RUNLOG_HEADER);
        let parsed = RunLogRow {
            iteration: field(&record, row, 0, &RUNLOG_HEADER)?,
            reward_queries: field(&record, row, 1, &RUNLOG_HEADER)?,
            mean_train_reward: f(2)?,
            eval_seen_reward: f(3)?,
            eval_unseen_reward: f(4)?,
            cross_reward: f(5)?,
            diversity: f(6)?,
            clip_fraction: f(7)?,
            wall_ms: field(&record, row, 8, &RUNLOG_HEADER)?,
        };
        if let Some(prev) = rows.last() {
            if parsed.reward_queries <= prev.reward_queries {
                return Err(CsvError::NotIncreasing {
                    row,
                    previous: prev.reward_queries,
                    got: parsed.reward_queries,
                });
            }
        }
        rows.push(parsed);
    }
    Ok(rows)
}

pub fn write_losscurve(losses: &[f64]) -> Result<String, CsvError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(LOSSCURVE_HEADER)?;
    for (step, loss) in losses.iter().enumerate() {
        w.write_record([step.to_string(), loss.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_losscurve(text: &str) -> Result<Vec<f64>, CsvError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    check_header(&mut reader, &LOSSCURVE_HEADER)?;
    reader
        .records()
        .enumerate()
        .map(|(row, r)| field::<f64>(&r?, row, 1, &LOSSCURVE_HEADER))
        .collect()
}

/// Numeric columns of any CSV with a header row, for plotting.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    /// `rows[i][j]` is column `j` of row `i`; unparseable cells are `NaN`.
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn parse(text: &str) -> Result<Self, CsvError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            rows.push(record.iter().map(|v| v.trim().parse().unwrap_or(f64::NAN)).collect());
        }
        Ok(Self { columns, rows })
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r.get(j).copied().unwrap_or(f64::NAN)).collect()
    }
}
