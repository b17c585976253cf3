//! Benchmark CSV ingestion: header row, one timestamp column, numeric
//! variates.

use std::path::{Path, PathBuf};

use casa_core::data::SeriesTable;
use casa_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum CsvError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Malformed {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: no data rows")]
    Empty { path: PathBuf },
    #[error("{path}: need a timestamp column and at least one variate")]
    NoVariates { path: PathBuf },
    #[error("{path}: date column `{name}` not in header")]
    MissingDateColumn { path: PathBuf, name: String },
    #[error("{path}: line {line}, column `{column}`: missing value")]
    MissingValue {
        path: PathBuf,
        line: u64,
        column: String,
    },
    #[error("{path}: line {line}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        path: PathBuf,
        line: u64,
        column: String,
        value: String,
    },
}

/// Non-fatal findings while loading.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CsvWarning {
    NonMonotonicTimestamp {
        line: u64,
        previous: String,
        current: String,
    },
}

impl std::fmt::Display for CsvWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CsvWarning::NonMonotonicTimestamp {
                line,
                previous,
                current,
            } => {
                write!(
                    f,
                    "line {line}: timestamp `{current}` is not after `{previous}`"
                )
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CsvOptions {
    pub delimiter: u8,
    /// Timestamp column; the first column when `None`.
    pub date_column: Option<String>,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions {
            delimiter: b',',
            date_column: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub table: SeriesTable,
    pub warnings: Vec<CsvWarning>,
}

/// Numeric stamps compare as numbers, anything else (ISO dates) as text.
fn increasing(prev: &str, next: &str) -> bool {
    match (prev.parse::<f64>(), next.parse::<f64>()) {
        (Ok(a), Ok(b)) => b > a,
        _ => next > prev,
    }
}

pub fn load_csv(path: &Path, opts: &CsvOptions) -> Result<Loaded, CsvError> {
    let file = std::fs::File::open(path).map_err(|source| CsvError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, path, opts)
}

/// Parses CSV text from any reader; `path` only labels errors.
pub fn read_csv(
    reader: impl std::io::Read,
    path: &Path,
    opts: &CsvOptions,
) -> Result<Loaded, CsvError> {
    let malformed = |source| CsvError::Malformed {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(malformed)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.len() < 2 {
        return Err(CsvError::NoVariates {
            path: path.to_path_buf(),
        });
    }
    let date_idx =
        match &opts.date_column {
            None => 0,
            Some(name) => header.iter().position(|h| h == name).ok_or_else(|| {
                CsvError::MissingDateColumn {
                    path: path.to_path_buf(),
                    name: name.clone(),
                }
            })?,
        };
    let variate_names: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut timestamps: Vec<String> = Vec::new();
    let mut values = Vec::new();
    let mut warnings = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(malformed)?;
        let line = record.position().map_or(0, |p| p.line());
        let stamp = record[date_idx].trim().to_string();
        if let Some(prev) = timestamps.last() {
            if !increasing(prev, &stamp) {
                warnings.push(CsvWarning::NonMonotonicTimestamp {
                    line,
                    previous: prev.clone(),
                    current: stamp.clone(),
                });
            }
        }
        for (i, field) in record.iter().enumerate() {
            if i == date_idx {
                continue;
            }
            let field = field.trim();
            if field.is_empty() || field.eq_ignore_ascii_case("nan") {
                return Err(CsvError::MissingValue {
                    path: path.to_path_buf(),
                    line,
                    column: header[i].clone(),
                });
            }
            let v = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CsvError::Parse {
                    path: path.to_path_buf(),
                    line,
                    column: header[i].clone(),
                    value: field.to_string(),
                })?;
            values.push(v);
        }
        timestamps.push(stamp);
    }
    if timestamps.is_empty() {
        return Err(CsvError::Empty {
            path: path.to_path_buf(),
        });
    }
    let t = timestamps.len();
    let n = variate_names.len();
    let tensor = Tensor::new([t, n], values).expect("row width checked by the csv reader");
    let table = SeriesTable::new(timestamps, tensor, variate_names)
        .expect("shape built from the same rows");
    Ok(Loaded { table, warnings })
}
