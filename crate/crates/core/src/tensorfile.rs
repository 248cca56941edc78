//! Versioned binary file of named `f64` matrices.
//!
//! Layout (little endian):
//!
//! ```text
//! magic  b"PNTF"
//! u32    format version
//! u32    tensor count
//! repeat:
//!   u32  name length, name bytes (UTF-8)
//!   u64  rows, u64 cols
//!   f64  rows * cols values
//! u64    FNV-1a hash of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"PNTF";
pub const TENSOR_FILE_VERSION: u32 = 1;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&TENSOR_FILE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, m) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let h = fnv1a(&buf);
    buf.extend_from_slice(&h.to_le_bytes());
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "tensor file truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a tensor file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != TENSOR_FILE_VERSION {
        return Err(Error::Checkpoint(format!(
            "tensor file version {version}, expected {TENSOR_FILE_VERSION}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| {
                Error::Checkpoint(format!("tensor {name} has absurd shape {rows}x{cols}"))
            })?;
        let raw = r.take(n)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, data)));
    }
    let body_end = r.pos;
    let stored = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(
            "trailing bytes after tensor file checksum".into(),
        ));
    }
    if fnv1a(&bytes[..body_end]) != stored {
        return Err(Error::Checkpoint(
            "tensor file checksum mismatch (corrupted)".into(),
        ));
    }
    Ok(out)
}

pub fn write_tensors<'a>(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = (&'a str, &'a Matrix)>,
) -> Result<()> {
    fs::write(path, encode_tensors(tensors))?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<Vec<(String, Matrix)>> {
    decode_tensors(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let a = Matrix::from_rows(&[[1.0, -2.5], [3.0, f64::MIN_POSITIVE]]);
        let b = Matrix::zeros(0, 3);
        let bytes = encode_tensors([("a", &a), ("b", &b)]);
        let back = decode_tensors(&bytes).unwrap();
        assert_eq!(back, vec![("a".to_string(), a), ("b".to_string(), b)]);

        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(
                decode_tensors(&bytes[..cut]),
                Err(Error::Checkpoint(_))
            ));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 0x40;
        assert!(matches!(
            decode_tensors(&flipped),
            Err(Error::Checkpoint(_))
        ));
    }
}
