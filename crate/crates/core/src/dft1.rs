//! `DFT1` binary tensor files.
//!
//! ```text
//! magic      4 bytes  "DFT1"
//! dtype      u8       0 = FP32, 1 = DFP
//! bit_width  u8       32 for FP32, P for DFP
//! exponent   i8       DFP only
//! rank       u32 LE
//! dims       u32 LE * rank
//! payload    f32 LE or i16 LE per element
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{DfpError, Result};
use crate::tensor::{DfpTensor, FloatTensor};

pub const MAGIC: &[u8; 4] = b"DFT1";
const DTYPE_FP32: u8 = 0;
const DTYPE_DFP: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum StoredTensor {
    Float(FloatTensor),
    Dfp(DfpTensor),
}

impl From<FloatTensor> for StoredTensor {
    fn from(t: FloatTensor) -> Self {
        StoredTensor::Float(t)
    }
}

impl From<DfpTensor> for StoredTensor {
    fn from(t: DfpTensor) -> Self {
        StoredTensor::Dfp(t)
    }
}

fn header(out: &mut Vec<u8>, dtype: u8, bits: u8, exponent: Option<i8>, shape: &[usize]) {
    out.extend_from_slice(MAGIC);
    out.push(dtype);
    out.push(bits);
    if let Some(e) = exponent {
        out.push(e as u8);
    }
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode(t: &StoredTensor) -> Vec<u8> {
    let mut out = Vec::new();
    match t {
        StoredTensor::Float(f) => {
            header(&mut out, DTYPE_FP32, 32, None, f.shape());
            out.reserve(f.len() * 4);
            for v in f.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        StoredTensor::Dfp(q) => {
            header(
                &mut out,
                DTYPE_DFP,
                q.bits() as u8,
                Some(q.exponent() as i8),
                q.shape(),
            );
            out.reserve(q.len() * 2);
            for v in q.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DfpError::Format {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn err(&self, offset: usize, reason: impl Into<String>) -> DfpError {
        DfpError::Format {
            offset,
            reason: reason.into(),
        }
    }
}

pub fn decode(buf: &[u8]) -> Result<StoredTensor> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.err(0, "bad magic, expected `DFT1`"));
    }
    let dtype_at = r.pos;
    let dtype = r.u8("dtype")?;
    let bits_at = r.pos;
    let bits = r.u8("bit width")?;
    let exponent = match dtype {
        DTYPE_FP32 => {
            if bits != 32 {
                return Err(r.err(bits_at, format!("FP32 tensor with bit width {bits}")));
            }
            None
        }
        DTYPE_DFP => Some(r.u8("shared exponent")? as i8),
        other => return Err(r.err(dtype_at, format!("unknown dtype tag {other}"))),
    };
    let rank = r.u32("rank")? as usize;
    if rank > 32 {
        return Err(r.err(r.pos - 4, format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| r.err(r.pos, "element count overflows"))?;
    let payload_at = r.pos;
    let out = match exponent {
        None => {
            let raw = r.take(count.saturating_mul(4), "FP32 payload")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect::<Vec<_>>();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(r.err(payload_at + 4 * i, "non-finite FP32 element"));
            }
            StoredTensor::Float(FloatTensor::new(shape, data)?)
        }
        Some(e) => {
            let raw = r.take(count.saturating_mul(2), "DFP payload")?;
            let data = raw
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect::<Vec<_>>();
            match DfpTensor::new(shape, data, e as i32, bits as u32) {
                Ok(t) => StoredTensor::Dfp(t),
                Err(DfpError::ElementRange { index, value, bits }) => {
                    return Err(r.err(
                        payload_at + 2 * index,
                        format!("element {value} exceeds {bits}-bit range"),
                    ))
                }
                Err(DfpError::BitWidth(b)) => {
                    return Err(r.err(bits_at, format!("unsupported bit width {b}")))
                }
                Err(other) => return Err(other),
            }
        }
    };
    if r.pos != buf.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(out)
}

pub fn read_path(path: impl AsRef<Path>) -> Result<StoredTensor> {
    decode(&fs::read(path)?)
}

pub fn write_path(path: impl AsRef<Path>, t: &StoredTensor) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t))?;
    Ok(())
}
