//! CSV and PGM helpers shared by the library and the CLI.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! file back yields bit-identical values. Files use `,` separators, `.`
//! decimals and LF line endings.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array1;

use crate::error::{Error, Result};
use crate::operators::{DataVector, ImageVector};

pub(crate) fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

pub(crate) fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| format!("`{s}` is not a number"))
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .flexible(true)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub(crate) fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn parse_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads a headed CSV, checks the header, and returns the data records.
fn read_table(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut records = csv_reader(path)?.into_records();
    let first = records
        .next()
        .ok_or_else(|| parse_error(path, "empty file"))??;
    if first.iter().ne(header.iter().copied()) {
        return Err(parse_error(
            path,
            format!("expected header `{}`", header.join(",")),
        ));
    }
    records
        .map(|r| {
            let r = r?;
            if r.len() != header.len() {
                return Err(parse_error(path, format!("record has {} fields", r.len())));
            }
            Ok(r)
        })
        .collect()
}

/// `index,value` per component.
pub fn write_vector_csv(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    w.write_record(["index", "value"])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), format_f64(*v)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_vector_csv(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let records = read_table(path, &["index", "value"])?;
    let mut out = Vec::with_capacity(records.len());
    for (expected, r) in records.iter().enumerate() {
        let index: usize = r[0]
            .parse()
            .map_err(|_| parse_error(path, format!("bad index `{}`", &r[0])))?;
        if index != expected {
            return Err(parse_error(path, format!("index {index} out of order")));
        }
        out.push(parse_f64(&r[1]).map_err(|e| parse_error(path, e))?);
    }
    Ok(out)
}

pub fn write_data_csv(path: impl AsRef<Path>, data: &DataVector) -> Result<()> {
    write_vector_csv(path, data.as_slice())
}

pub fn read_data_csv(path: impl AsRef<Path>) -> Result<DataVector> {
    DataVector::new(Array1::from(read_vector_csv(path)?))
}

/// `row,col,value` per pixel, row-major from row 0.
pub fn write_image_csv(path: impl AsRef<Path>, image: &ImageVector) -> Result<()> {
    let path = path.as_ref();
    let (_, cols) = image.shape().ok_or(Error::MissingShape)?;
    let mut w = csv_writer(path)?;
    w.write_record(["row", "col", "value"])?;
    for (i, v) in image.as_slice().iter().enumerate() {
        w.write_record([(i / cols).to_string(), (i % cols).to_string(), format_f64(*v)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_image_csv(path: impl AsRef<Path>) -> Result<ImageVector> {
    let path = path.as_ref();
    let records = read_table(path, &["row", "col", "value"])?;
    let mut cells = Vec::with_capacity(records.len());
    let (mut rows, mut cols) = (0usize, 0usize);
    for r in &records {
        let row: usize = r[0].parse().map_err(|_| parse_error(path, "bad row"))?;
        let col: usize = r[1].parse().map_err(|_| parse_error(path, "bad col"))?;
        let v = parse_f64(&r[2]).map_err(|e| parse_error(path, e))?;
        rows = rows.max(row + 1);
        cols = cols.max(col + 1);
        cells.push((row, col, v));
    }
    if rows * cols != cells.len() {
        return Err(parse_error(path, "image grid is incomplete"));
    }
    let mut values = vec![f64::NAN; rows * cols];
    for (row, col, v) in cells {
        values[row * cols + col] = v;
    }
    ImageVector::from_vec(values)?.with_shape(rows, cols)
}

/// 8-bit binary graymap, min-max normalized, top image row first.
pub fn write_pgm(path: impl AsRef<Path>, image: &ImageVector) -> Result<()> {
    let path = path.as_ref();
    let (rows, cols) = image.shape().ok_or(Error::MissingShape)?;
    let v = image.as_slice();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut bytes = Vec::with_capacity(rows * cols + 32);
    write!(bytes, "P5\n{cols} {rows}\n255\n").expect("in-memory write");
    // row 0 is the bottom of the image
    for row in (0..rows).rev() {
        for col in 0..cols {
            let t = if span > 0.0 { (v[row * cols + col] - lo) / span } else { 0.0 };
            bytes.push((t * 255.0).round() as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}
