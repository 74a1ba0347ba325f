//! CSV matrix ingestion and output.
//!
//! Every file has one header row. Locations in diagnostics are 1-based file
//! lines and columns, so the header is line 1 and the first data row line 2.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use pln_core::{CountDataset, PlnError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InputError {
    #[error("{}: cannot read file: {source}", .path.display())]
    Read { path: PathBuf, source: std::io::Error },

    #[error("{}: malformed CSV at line {line}: {message}", .path.display())]
    Malformed { path: PathBuf, line: u64, message: String },

    #[error("{}: no header row", .path.display())]
    MissingHeader { path: PathBuf },

    #[error("{}: no data rows", .path.display())]
    Empty { path: PathBuf },

    #[error("{}: line {line} has {found} fields, expected {expected}", .path.display())]
    RaggedRow { path: PathBuf, line: u64, found: usize, expected: usize },

    #[error("{}: line {line}, column {column} ({name}): {value:?} is not a number", .path.display())]
    NonNumeric { path: PathBuf, line: u64, column: usize, name: String, value: String },

    #[error("{}: line {line}, column {column} ({name}): {value:?} is not a nonnegative integer count", .path.display())]
    NonInteger { path: PathBuf, line: u64, column: usize, name: String, value: String },

    #[error("{}: line {line}, column {column} ({name}): {value:?} is not finite", .path.display())]
    NonFinite { path: PathBuf, line: u64, column: usize, name: String, value: String },

    #[error("row count mismatch: {} has {n_counts} data rows but {} has {n_other}", .counts.display(), .other.display())]
    RowMismatch { counts: PathBuf, n_counts: usize, other: PathBuf, n_other: usize },

    #[error("column mismatch: {} has {found} columns, expected {expected} to match {}", .offsets.display(), .counts.display())]
    ColumnMismatch { offsets: PathBuf, found: usize, expected: usize, counts: PathBuf },

    #[error("{}: covariate columns are linearly dependent ({source})", .path.display())]
    RankDeficient { path: PathBuf, source: PlnError },

    #[error("{}: invalid dataset: {source}", .path.display())]
    Dataset { path: PathBuf, source: PlnError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Count,
    Real,
}

/// A parsed CSV matrix with its header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub values: DMatrix<f64>,
}

fn malformed(path: &Path, e: csv::Error) -> InputError {
    let line = e.position().map_or(0, |p| p.line());
    InputError::Malformed { path: path.to_path_buf(), line, message: e.to_string() }
}

/// Parses CSV bytes already read from `path`.
pub fn parse_table(path: &Path, bytes: &[u8], kind: CellKind) -> Result<Table, InputError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(bytes);
    let header: Vec<String> = reader.headers().map_err(|e| malformed(path, e))?.iter().map(str::to_owned).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(InputError::MissingHeader { path: path.to_path_buf() });
    }
    let cols = header.len();
    let mut values = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| malformed(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols {
            return Err(InputError::RaggedRow { path: path.to_path_buf(), line, found: record.len(), expected: cols });
        }
        for (j, cell) in record.iter().enumerate() {
            values.push(parse_cell(path, line, j, &header[j], cell, kind)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(InputError::Empty { path: path.to_path_buf() });
    }
    Ok(Table { header, values: DMatrix::from_row_slice(rows, cols, &values) })
}

fn parse_cell(path: &Path, line: u64, j: usize, name: &str, cell: &str, kind: CellKind) -> Result<f64, InputError> {
    let cell = cell.trim();
    let located = |value: &str| (path.to_path_buf(), line, j + 1, name.to_owned(), value.to_owned());
    let value: f64 = cell.parse().map_err(|_| {
        let (path, line, column, name, value) = located(cell);
        InputError::NonNumeric { path, line, column, name, value }
    })?;
    if !value.is_finite() {
        let (path, line, column, name, value) = located(cell);
        return Err(InputError::NonFinite { path, line, column, name, value });
    }
    if kind == CellKind::Count && (value < 0.0 || value.fract() != 0.0) {
        let (path, line, column, name, value) = located(cell);
        return Err(InputError::NonInteger { path, line, column, name, value });
    }
    Ok(value)
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, InputError> {
    std::fs::read(path).map_err(|source| InputError::Read { path: path.to_path_buf(), source })
}

/// The raw inputs of a dataset, kept so callers can digest exactly the bytes
/// that were parsed.
pub struct DatasetFiles {
    pub counts: (PathBuf, Vec<u8>),
    pub covariates: (PathBuf, Vec<u8>),
    pub offsets: Option<(PathBuf, Vec<u8>)>,
}

impl DatasetFiles {
    pub fn read(counts: &Path, covariates: &Path, offsets: Option<&Path>) -> Result<Self, InputError> {
        Ok(Self {
            counts: (counts.to_path_buf(), read_bytes(counts)?),
            covariates: (covariates.to_path_buf(), read_bytes(covariates)?),
            offsets: offsets.map(|p| read_bytes(p).map(|b| (p.to_path_buf(), b))).transpose()?,
        })
    }
}

/// A validated dataset plus the column names of its inputs.
#[derive(Debug)]
pub struct NamedDataset {
    pub data: CountDataset,
    pub variables: Vec<String>,
    pub covariates: Vec<String>,
}

pub fn parse_dataset(files: &DatasetFiles) -> Result<NamedDataset, InputError> {
    let (y_path, y_bytes) = &files.counts;
    let (x_path, x_bytes) = &files.covariates;
    let y = parse_table(y_path, y_bytes, CellKind::Count)?;
    let x = parse_table(x_path, x_bytes, CellKind::Real)?;
    let row_check = |other: &Path, n_other: usize| {
        if n_other == y.values.nrows() {
            Ok(())
        } else {
            Err(InputError::RowMismatch {
                counts: y_path.clone(),
                n_counts: y.values.nrows(),
                other: other.to_path_buf(),
                n_other,
            })
        }
    };
    row_check(x_path, x.values.nrows())?;
    let offsets = match &files.offsets {
        None => None,
        Some((o_path, o_bytes)) => {
            let o = parse_table(o_path, o_bytes, CellKind::Real)?;
            row_check(o_path, o.values.nrows())?;
            if o.values.ncols() != y.values.ncols() {
                return Err(InputError::ColumnMismatch {
                    offsets: o_path.clone(),
                    found: o.values.ncols(),
                    expected: y.values.ncols(),
                    counts: y_path.clone(),
                });
            }
            Some(o.values)
        }
    };
    let data = CountDataset::new(y.values, x.values, offsets).map_err(|source| match source {
        PlnError::RankDeficient { .. } => InputError::RankDeficient { path: x_path.clone(), source },
        other => InputError::Dataset { path: y_path.clone(), source: other },
    })?;
    Ok(NamedDataset { data, variables: y.header, covariates: x.header })
}

/// Renders a matrix as CSV. Counts are written as integers, everything else
/// with 17 significant digits.
pub fn format_table(header: &[String], values: &DMatrix<f64>, kind: CellKind) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer.write_record(header).expect("in-memory write");
    for i in 0..values.nrows() {
        let row: Vec<String> = values
            .row(i)
            .iter()
            .map(|&v| match kind {
                CellKind::Count => format!("{v:.0}"),
                CellKind::Real => format!("{v:.16e}"),
            })
            .collect();
        writer.write_record(row).expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("CSV output is UTF-8")
}

/// Column names `prefix1 .. prefixN`.
pub fn numbered(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|j| format!("{prefix}{j}")).collect()
}

/// One CSV line of the confidence-interval table, without the newline.
pub fn interval_row(fields: [&str; 2], values: [f64; 4], method: &str) -> String {
    let mut line = String::new();
    let _ = write!(line, "{},{}", csv_field(fields[0]), csv_field(fields[1]));
    for v in values {
        let _ = write!(line, ",{v:.16e}");
    }
    let _ = write!(line, ",{method}");
    line
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(text: &str, kind: CellKind) -> Result<Table, InputError> {
        parse_table(Path::new("t.csv"), text.as_bytes(), kind)
    }

    #[test]
    fn parses_toy_table() {
        let t = table("a,b\n1,2\n3,4\n5,6\n", CellKind::Count).unwrap();
        assert_eq!(t.header, ["a", "b"]);
        assert_eq!(t.values, DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    }

    #[test]
    fn fractional_count_is_located() {
        let err = table("a,b\n1,2\n3,1.5\n", CellKind::Count).unwrap_err();
        match err {
            InputError::NonInteger { line, column, ref name, ref value, .. } => {
                assert_eq!((line, column, name.as_str(), value.as_str()), (3, 2, "b", "1.5"));
            }
            other => panic!("unexpected {other}"),
        }
        assert!(err.to_string().contains("line 3, column 2"));
    }

    #[test]
    fn negative_count_is_rejected() {
        assert!(matches!(table("a\n-1\n", CellKind::Count), Err(InputError::NonInteger { .. })));
    }

    #[test]
    fn non_numeric_and_non_finite_cells() {
        let err = table("a,b\n1,x\n", CellKind::Real).unwrap_err();
        assert!(matches!(err, InputError::NonNumeric { line: 2, column: 2, .. }), "{err}");
        let err = table("a\nNaN\n", CellKind::Real).unwrap_err();
        assert!(matches!(err, InputError::NonFinite { line: 2, column: 1, .. }), "{err}");
    }

    #[test]
    fn ragged_and_empty_files() {
        assert!(matches!(
            table("a,b\n1,2\n3\n", CellKind::Real),
            Err(InputError::RaggedRow { line: 3, found: 1, expected: 2, .. })
        ));
        assert!(matches!(table("a,b\n", CellKind::Real), Err(InputError::Empty { .. })));
        assert!(matches!(table("", CellKind::Real), Err(InputError::MissingHeader { .. })));
    }

    fn files(y: &str, x: &str, o: Option<&str>) -> DatasetFiles {
        DatasetFiles {
            counts: ("Y.csv".into(), y.as_bytes().to_vec()),
            covariates: ("X.csv".into(), x.as_bytes().to_vec()),
            offsets: o.map(|o| (PathBuf::from("O.csv"), o.as_bytes().to_vec())),
        }
    }

    #[test]
    fn dataset_shapes_and_default_offsets() {
        let d = parse_dataset(&files("y1,y2\n1,0\n2,3\n0,4\n", "one,x\n1,0.5\n1,-1\n1,2\n", None)).unwrap();
        assert_eq!((d.data.n(), d.data.p(), d.data.m()), (3, 2, 2));
        assert_eq!(d.data.offsets(), &DMatrix::zeros(3, 2));
        assert_eq!(d.variables, ["y1", "y2"]);
        assert_eq!(d.covariates, ["one", "x"]);
    }

    #[test]
    fn dataset_diagnostics_are_distinct() {
        let err = parse_dataset(&files("y\n1\n2\n", "x\n1\n", None)).unwrap_err();
        assert!(matches!(err, InputError::RowMismatch { n_counts: 2, n_other: 1, .. }), "{err}");
        let err = parse_dataset(&files("y\n1\n2\n3\n", "a,b\n1,1\n2,2\n3,3\n", None)).unwrap_err();
        assert!(matches!(err, InputError::RankDeficient { .. }), "{err}");
        assert!(err.to_string().contains("X.csv"));
        let err = parse_dataset(&files("y1,y2\n1,2\n", "x\n1\n", Some("o\n0\n"))).unwrap_err();
        assert!(matches!(err, InputError::ColumnMismatch { found: 1, expected: 2, .. }), "{err}");
    }

    #[test]
    fn table_round_trip_is_lossless() {
        let values = DMatrix::from_row_slice(2, 3, &[0.1, -1.0 / 3.0, 1e-300, 2.5e10, std::f64::consts::PI, 0.0]);
        let header = numbered("c", 3);
        let text = format_table(&header, &values, CellKind::Real);
        let back = table(&text, CellKind::Real).unwrap();
        assert_eq!(back.values, values);
        assert_eq!(back.header, header);
        let counts = DMatrix::from_row_slice(1, 2, &[0.0, 123456.0]);
        let text = format_table(&numbered("y", 2), &counts, CellKind::Count);
        assert_eq!(text, "y1,y2\n0,123456\n");
    }

    #[test]
    fn interval_row_quotes_names() {
        let line = interval_row(["a,b", "y"], [1.0, 0.5, 0.0, 2.0], "fisher");
        assert!(line.starts_with("\"a,b\",y,1.0000000000000000e0,"));
        assert!(line.ends_with(",fisher"));
    }
}
