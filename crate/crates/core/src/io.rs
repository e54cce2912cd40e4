//! Dataset files.
//!
//! Binary matrix layout (`NLUNMIX1`):
//!
//! | offset | size            | content                                   |
//! |--------|-----------------|-------------------------------------------|
//! | 0      | 8               | ASCII magic `NLUNMIX1`                    |
//! | 8      | 8               | rows, u64 little-endian                   |
//! | 16     | 8               | cols, u64 little-endian                   |
//! | 24     | rows * cols * 8 | row-major f64 values, IEEE-754 little-endian |
//!
//! The CSV layout has a `rows,cols` header line followed by one line of
//! comma-separated decimals per row. Values are written with the shortest
//! representation that parses back to the same `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, UnmixError};

pub const MAGIC: &[u8; 8] = b"NLUNMIX1";
const HEADER_LEN: u64 = 24;

/// Size in bytes of a binary matrix file.
pub fn binary_file_len(rows: usize, cols: usize) -> u64 {
    HEADER_LEN + (rows as u64) * (cols as u64) * 8
}

pub fn encode_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(binary_file_len(m.nrows(), m.ncols()) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_binary(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(UnmixError::MagicMismatch {
            path: path.to_path_buf(),
        });
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(UnmixError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8-byte slice"));
    let cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8-byte slice"));
    let payload = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .filter(|n| usize::try_from(*n).is_ok() && n.checked_add(HEADER_LEN).is_some())
        .ok_or(UnmixError::DimensionOverflow { rows, cols })?;
    let found = bytes.len() as u64 - HEADER_LEN;
    if found < payload {
        return Err(UnmixError::TruncatedPayload {
            path: path.to_path_buf(),
            expected: payload,
            found,
        });
    }
    if found > payload {
        return Err(UnmixError::Parse(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            found - payload
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let body = &bytes[HEADER_LEN as usize..];
    let mut m = DMatrix::zeros(rows, cols);
    for (k, chunk) in body.chunks_exact(8).enumerate() {
        m[(k / cols, k % cols)] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
    }
    Ok(m)
}

pub fn encode_csv(m: &DMatrix<f64>) -> String {
    let mut s = format!("{},{}\n", m.nrows(), m.ncols());
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn decode_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| UnmixError::Parse("empty CSV".into()))?;
    let (rows, cols) = parse_csv_header(header)
        .ok_or_else(|| UnmixError::Parse(format!("bad CSV header {header:?}")))?;
    rows.checked_mul(cols)
        .ok_or(UnmixError::DimensionOverflow {
            rows: rows as u64,
            cols: cols as u64,
        })?;
    let mut m = DMatrix::zeros(rows, cols);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        if i >= rows {
            return Err(UnmixError::Parse(format!("more than {rows} data rows")));
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols {
            return Err(UnmixError::Parse(format!(
                "row {i} has {} fields, expected {cols}",
                fields.len()
            )));
        }
        for (j, f) in fields.iter().enumerate() {
            m[(i, j)] = f
                .trim()
                .parse::<f64>()
                .map_err(|e| UnmixError::Parse(format!("row {i} col {j}: {e}")))?;
        }
        seen += 1;
    }
    if seen != rows {
        return Err(UnmixError::Parse(format!("expected {rows} rows, found {seen}")));
    }
    Ok(m)
}

fn parse_csv_header(line: &str) -> Option<(usize, usize)> {
    let (r, c) = line.trim().split_once(',')?;
    Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
}

pub fn save_matrix(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    fs::write(path, encode_binary(m))?;
    Ok(())
}

pub fn save_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    fs::write(path, encode_csv(m))?;
    Ok(())
}

/// Loads either format. Files starting with the magic tag are binary; text
/// files with a `rows,cols` header are CSV; anything else is a magic mismatch.
pub fn load_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(MAGIC) {
        return decode_binary(&bytes, path);
    }
    if let Ok(text) = std::str::from_utf8(&bytes) {
        if text.lines().next().and_then(parse_csv_header).is_some() {
            return decode_csv(text);
        }
    }
    Err(UnmixError::MagicMismatch {
        path: path.to_path_buf(),
    })
}

/// Flat `key=value` text, one pair per line, `#` comments allowed.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UnmixError::Parse(format!("line {}: expected key=value", i + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

pub fn write_key_values<'a, I>(path: &Path, pairs: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, String)>,
{
    let mut f = fs::File::create(path)?;
    for (k, v) in pairs {
        writeln!(f, "{k}={v}")?;
    }
    Ok(())
}
