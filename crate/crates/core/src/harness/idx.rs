//! IDX image/label files, optionally gzip-compressed.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{DfpError, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IdxFile {
    Images { count: usize, rows: usize, cols: usize, pixels: Vec<u8> },
    Labels(Vec<u8>),
}

impl IdxFile {
    pub fn count(&self) -> usize {
        match self {
            IdxFile::Images { count, .. } => *count,
            IdxFile::Labels(l) => l.len(),
        }
    }
}

fn be_u32(b: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(b[at..at + 4].try_into().expect("four bytes"))
}

/// Parses an in-memory IDX buffer (already decompressed).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    let bad = |offset, reason: String| Err(DfpError::Format { offset, reason });
    if bytes.len() < 8 {
        return bad(0, format!("expected at least 8 header bytes, found {}", bytes.len()));
    }
    let magic = be_u32(bytes, 0);
    let dims = match magic {
        IMAGES_MAGIC => 3,
        LABELS_MAGIC => 1,
        _ => return bad(0, format!("unknown IDX magic {magic:#010x}")),
    };
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return bad(bytes.len(), format!("expected {header} header bytes, found {}", bytes.len()));
    }
    let d: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + d.iter().product::<usize>();
    if bytes.len() != expected {
        return bad(
            bytes.len().min(expected),
            format!("expected {expected} bytes for dims {d:?}, found {}", bytes.len()),
        );
    }
    let body = bytes[header..].to_vec();
    Ok(match magic {
        IMAGES_MAGIC => IdxFile::Images {
            count: d[0],
            rows: d[1],
            cols: d[2],
            pixels: body,
        },
        _ => IdxFile::Labels(body),
    })
}

/// Reads the raw (decompressed) bytes of an IDX file.
pub fn read_idx_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_idx(path: impl AsRef<Path>) -> Result<IdxFile> {
    parse_idx(&read_idx_bytes(path)?)
}

/// Serializes to the uncompressed IDX layout.
pub fn encode_idx(file: &IdxFile) -> Vec<u8> {
    let mut out = Vec::new();
    match file {
        IdxFile::Images { count, rows, cols, pixels } => {
            out.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
            for d in [count, rows, cols] {
                out.extend_from_slice(&(*d as u32).to_be_bytes());
            }
            out.extend_from_slice(pixels);
        }
        IdxFile::Labels(l) => {
            out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
            out.extend_from_slice(&(l.len() as u32).to_be_bytes());
            out.extend_from_slice(l);
        }
    }
    out
}
