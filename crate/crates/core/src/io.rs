//! Matrix CSV files: plain numbers, no header, one matrix row per line.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{GdtError, Result};
use crate::matrix::Mat;

/// Parses a matrix from CSV text. `origin` is used in error messages.
pub fn parse_matrix_csv(text: &str, origin: &Path) -> Result<Mat> {
    let parse_err = |line: usize, column: usize, message: String| GdtError::Parse {
        path: origin.to_path_buf(),
        line,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut cols = None;
    let mut rows = 0;
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        match cols {
            None => cols = Some(record.len()),
            Some(c) if c != record.len() => {
                return Err(parse_err(
                    line,
                    record.len().min(c) + 1,
                    format!("ragged row: expected {c} fields, found {}", record.len()),
                ))
            }
            _ => {}
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field
                .parse()
                .map_err(|_| parse_err(line, j + 1, format!("not a number: {field:?}")))?;
            if !value.is_finite() {
                return Err(parse_err(line, j + 1, format!("non-finite value {field:?}")));
            }
            data.push(value);
        }
        rows += 1;
    }
    let cols = cols.ok_or_else(|| parse_err(1, 1, "empty matrix file".to_string()))?;
    Mat::new(rows, cols, data)
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<Mat> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| GdtError::io(path, e))?;
    parse_matrix_csv(&text, path)
}

/// Formats a matrix as CSV using shortest round-trip float formatting.
pub fn format_matrix_csv(m: &Mat) -> String {
    let mut out = String::with_capacity(m.rows() * m.cols() * 20);
    for i in 0..m.rows() {
        for (j, x) in m.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(path: impl AsRef<Path>, m: &Mat) -> Result<()> {
    write_text(path, &format_matrix_csv(m))
}

pub(crate) fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| GdtError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| GdtError::io(path, e))
}
