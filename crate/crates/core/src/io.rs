//! File formats: sample CSV, grid and mask CSV, 16-bit PGM heatmaps and
//! training loss logs.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::grid::{ChannelGrid, GridSpec, Sample};
use crate::pipeline::LossRecord;

/// Reads `x1,x2,gain_db` records.
pub fn read_samples<R: Read>(reader: R) -> Result<Vec<Sample>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let s: Sample = rec?;
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_samples<W: Write>(writer: W, samples: &[Sample]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples_path(path: &Path) -> Result<Vec<Sample>> {
    read_samples(File::open(path)?)
}

pub fn write_samples_path(path: &Path, samples: &[Sample]) -> Result<()> {
    write_samples(BufWriter::new(File::create(path)?), samples)
}

/// H lines of W comma-separated numbers, no header.
pub fn write_matrix<W: Write>(writer: W, m: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for row in m.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(reader: R) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut data = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        for field in rec.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Shape(format!("row {}: cannot parse {field:?}", rows + 1)))?;
            data.push(v);
        }
        cols.get_or_insert(rec.len());
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Shape("empty matrix file".into()))?;
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Shape(e.to_string()))
}

/// Mask as a 0/1 matrix.
pub fn write_mask<W: Write>(writer: W, mask: &Array2<bool>) -> Result<()> {
    write_matrix(writer, &mask.mapv(|m| if m { 1.0 } else { 0.0 }))
}

pub fn read_mask<R: Read>(reader: R) -> Result<Array2<bool>> {
    let m = read_matrix(reader)?;
    if let Some(bad) = m.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::Shape(format!("mask entry {bad} is not 0 or 1")));
    }
    Ok(m.mapv(|v| v == 1.0))
}

pub fn write_matrix_path(path: &Path, m: &Array2<f64>) -> Result<()> {
    write_matrix(BufWriter::new(File::create(path)?), m)
}

pub fn read_matrix_path(path: &Path) -> Result<Array2<f64>> {
    read_matrix(File::open(path)?)
}

/// Path of the mask written next to a grid CSV: `grid.csv` → `grid.mask.csv`.
pub fn mask_path(grid_path: &Path) -> std::path::PathBuf {
    let stem = grid_path.file_stem().and_then(|s| s.to_str()).unwrap_or("grid");
    grid_path.with_file_name(format!("{stem}.mask.csv"))
}

/// Writes the values to `path` and the mask to [`mask_path`].
pub fn write_grid(path: &Path, grid: &ChannelGrid) -> Result<()> {
    write_matrix_path(path, grid.values())?;
    write_mask(BufWriter::new(File::create(mask_path(path))?), grid.mask())
}

/// Reads a grid and its mask; without a mask file every cell is valid.
pub fn read_grid(path: &Path, q: f64) -> Result<ChannelGrid> {
    let values = read_matrix_path(path)?;
    let (rows, cols) = values.dim();
    let spec = GridSpec::with_shape(rows, cols, q)?;
    let mp = mask_path(path);
    let mask = if mp.exists() { read_mask(File::open(mp)?)? } else { Array2::from_elem((rows, cols), true) };
    if mask.dim() != values.dim() {
        return Err(Error::Shape(format!("mask is {:?}, grid is {:?}", mask.dim(), values.dim())));
    }
    ChannelGrid::from_parts(spec, values, mask)
}

/// Binary 16-bit PGM. Valid cells map affinely from their [min, max] onto
/// [1, 65535]; invalid cells are 0.
pub fn write_pgm<W: Write>(mut writer: W, values: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    if values.dim() != mask.dim() {
        return Err(Error::Shape("mask does not match values".into()));
    }
    let (rows, cols) = values.dim();
    let (lo, hi) = values
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    write!(writer, "P5\n{cols} {rows}\n65535\n")?;
    let mut buf = Vec::with_capacity(rows * cols * 2);
    for (&v, &m) in values.iter().zip(mask.iter()) {
        let level: u16 = if !m {
            0
        } else if span > 0.0 {
            (1.0 + (v - lo) / span * 65534.0).round() as u16
        } else {
            65535
        };
        buf.extend_from_slice(&level.to_be_bytes());
    }
    writer.write_all(&buf)?;
    writer.flush()?;
    Ok(())
}

pub fn write_pgm_path(path: &Path, values: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    write_pgm(BufWriter::new(File::create(path)?), values, mask)
}

/// `iteration,rmse_db` lines with a header.
pub fn write_loss_log<W: Write>(writer: W, log: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_log<R: Read>(reader: R) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}
