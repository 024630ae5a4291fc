//! Binary dataset and checkpoint containers, plus small CSV import.
//!
//! Dataset (`MFAD`): magic, u32 version, u64 N, u32 D, u8 dtype (0 = f32),
//! 7 reserved bytes, then `N * D` row-major values.
//! Checkpoint (`MFAM`): magic, u32 version, u32 C, u32 D, u32 H, then pi,
//! mu, Lambda and the noise variances as f64. Everything little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::Dataset;
use crate::error::{MfaError, Result};
use crate::model::MfaParams;

pub const DATASET_MAGIC: &[u8; 4] = b"MFAD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFAM";
pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_HEADER_LEN: usize = 28;
pub const CHECKPOINT_HEADER_LEN: usize = 20;
/// Largest CSV (rows times columns) accepted by [`import_csv`].
pub const CSV_MAX_CELLS: usize = 1_000_000;
const DTYPE_F32: u8 = 0;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(MfaError::TruncatedFile)?;
        if end > self.buf.len() {
            return Err(MfaError::TruncatedFile);
        }
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(MfaError::TruncatedFile)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

fn check_magic(cur: &mut Cursor, magic: &[u8; 4]) -> Result<()> {
    if cur.buf.len() < 4 {
        return Err(MfaError::TruncatedFile);
    }
    if cur.take(4)? != magic {
        return Err(MfaError::BadMagic);
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(MfaError::UnsupportedVersion(version));
    }
    Ok(())
}

pub fn write_dataset<W: Write>(data: &Dataset, mut w: W) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(data.n() as u64).to_le_bytes())?;
    w.write_all(&(data.dim() as u32).to_le_bytes())?;
    w.write_all(&[DTYPE_F32, 0, 0, 0, 0, 0, 0, 0])?;
    for v in data.values() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    check_magic(&mut cur, DATASET_MAGIC)?;
    let n = cur.u64()?;
    let d = cur.u32()? as usize;
    let dtype = cur.take(8)?[0];
    if dtype != DTYPE_F32 {
        return Err(MfaError::UnsupportedDtype(dtype));
    }
    let n = usize::try_from(n).map_err(|_| MfaError::TruncatedFile)?;
    let count = n.checked_mul(d).ok_or(MfaError::TruncatedFile)?;
    let payload = cur.take(count.checked_mul(4).ok_or(MfaError::TruncatedFile)?)?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Dataset::new(n, d, values)
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(data, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_dataset(&bytes)
}

pub fn write_checkpoint<W: Write>(params: &MfaParams, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [params.n_components(), params.dim(), params.latent()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for block in [&params.pi, &params.mu, &params.lambda, &params.dnoise] {
        for v in block {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<MfaParams> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    check_magic(&mut cur, CHECKPOINT_MAGIC)?;
    let c = cur.u32()? as usize;
    let d = cur.u32()? as usize;
    let h = cur.u32()? as usize;
    let pi = cur.f64s(c)?;
    let mu = cur.f64s(c * d)?;
    let lambda = cur.f64s(c * d * h)?;
    let dnoise = cur.f64s(c * d)?;
    MfaParams::new(c, d, h, pi, mu, lambda, dnoise)
}

pub fn save_checkpoint(params: &MfaParams, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MfaParams> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

/// Scalars stored in a checkpoint: every trainable parameter plus the
/// redundant last mixing weight.
pub fn stored_scalar_count(c: u64, d: u64, h: u64) -> u128 {
    let (c, d, h) = (c as u128, d as u128, h as u128);
    c + c * d + c * d * h + c * d
}

/// Reads a numeric CSV file. A first line that does not parse as numbers is
/// treated as a header.
pub fn import_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| MfaError::Csv(e.to_string()))?;
    let mut values = Vec::new();
    let mut d = 0;
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| MfaError::Csv(e.to_string()))?;
        let parsed: std::result::Result<Vec<f32>, _> = rec.iter().map(str::parse::<f32>).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(MfaError::Csv(format!("line {}: {e}", i + 1))),
        };
        if rows == 0 {
            d = row.len();
        } else if row.len() != d {
            return Err(MfaError::Csv(format!(
                "line {} has {} fields, expected {d}",
                i + 1,
                row.len()
            )));
        }
        values.extend(row);
        rows += 1;
        if values.len() > CSV_MAX_CELLS {
            return Err(MfaError::Csv(format!(
                "more than {CSV_MAX_CELLS} cells; convert large files to the binary format"
            )));
        }
    }
    if rows == 0 {
        return Err(MfaError::Csv("no numeric rows".into()));
    }
    Dataset::new(rows, d, values)
}
