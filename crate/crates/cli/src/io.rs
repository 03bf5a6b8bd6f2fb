use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cpmts_core::MatrixSeries;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const LAYOUT: &str = "col-major";

/// Sidecar describing a series CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub layout: String,
}

pub fn read_meta(path: &Path) -> Result<Meta, CliError> {
    if !path.is_file() {
        return Err(CliError::Io(format!("meta not found: {}", path.display())));
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let meta: Meta =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("bad meta {}: {e}", path.display())))?;
    if meta.layout != LAYOUT {
        return Err(CliError::Io(format!("unsupported layout '{}' (expected {LAYOUT})", meta.layout)));
    }
    if meta.p == 0 || meta.q == 0 {
        return Err(CliError::Io("meta: p and q must be positive".into()));
    }
    Ok(meta)
}

/// Reads `n` rows of `p*q` values; a leading non-numeric row is a header.
pub fn read_series(input: &Path, meta: &Meta) -> Result<MatrixSeries, CliError> {
    if !input.is_file() {
        return Err(CliError::Io(format!("input not found: {}", input.display())));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(input)
        .map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
    let width = meta.p * meta.q;
    let mut values = Vec::with_capacity(meta.n * width);
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Io(format!("{}: {e}", input.display())))?;
        if i == 0 && rec.iter().next().is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        if rec.len() != width {
            return Err(CliError::Io(format!(
                "{}: row {} has {} fields, expected p*q = {width}",
                input.display(),
                i + 1,
                rec.len()
            )));
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::Io(format!("{}: row {}, column {}: '{field}' is not a number", input.display(), i + 1, j + 1))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != meta.n {
        return Err(CliError::Io(format!("{}: {rows} rows but meta says n = {}", input.display(), meta.n)));
    }
    Ok(MatrixSeries::from_vec_rows(meta.p, meta.q, &values)?)
}

pub fn write_series(dir: &Path, series: &MatrixSeries) -> Result<(), CliError> {
    let (p, q) = (series.p(), series.q());
    let mut header = Vec::with_capacity(p * q);
    for j in 1..=q {
        for i in 1..=p {
            header.push(format!("y{i}_{j}"));
        }
    }
    let mut wtr = csv_writer(&dir.join("series.csv"))?;
    wtr.write_record(&header).map_err(io_err)?;
    for y in series.observations() {
        wtr.write_record(y.as_slice().iter().map(|v| v.to_string())).map_err(io_err)?;
    }
    wtr.flush().map_err(|e| CliError::Io(e.to_string()))?;
    let meta = Meta { n: series.n(), p, q, layout: LAYOUT.into() };
    write_json(&dir.join("meta.json"), &meta)
}

/// Matrix as CSV with the given column names (none for a bare matrix).
pub fn write_matrix(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<(), CliError> {
    let mut wtr = csv_writer(path)?;
    if let Some(h) = header {
        wtr.write_record(h).map_err(io_err)?;
    }
    for i in 0..m.nrows() {
        wtr.write_record(m.row(i).iter().map(|v| v.to_string())).map_err(io_err)?;
    }
    wtr.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn column_names(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|l| format!("{prefix}{l}")).collect()
}

pub fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir.to_path_buf())
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn io_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}
