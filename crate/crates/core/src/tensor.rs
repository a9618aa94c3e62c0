//! XBEV binary tensor files.
//!
//! Layout: 4 ASCII magic bytes "XBEV", a little-endian u32 rank, `rank`
//! little-endian u32 dims, then the row-major payload as little-endian IEEE
//! 754 f32. Values are stored at 32-bit precision; kernels compute in f64
//! and cast on write.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XBEV";

/// A rank-checked tensor as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Tensor> {
        let expect: usize = dims.iter().product();
        if data.len() != expect {
            return Err(Error::shape("tensor", expect, data.len()));
        }
        Ok(Tensor { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Tensor> {
        Tensor::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(tensor.dims.len() as u32).to_le_bytes())?;
    for &d in &tensor.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in &tensor.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let format_err = |message: String| Error::Format {
        file: path.to_path_buf(),
        message,
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| format_err(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(format_err(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut u32_buf = [0u8; 4];
    r.read_exact(&mut u32_buf)
        .map_err(|e| format_err(format!("truncated rank: {e}")))?;
    let rank = u32::from_le_bytes(u32_buf) as usize;
    if rank > 8 {
        return Err(format_err(format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32_buf)
            .map_err(|e| format_err(format!("truncated dims: {e}")))?;
        dims.push(u32::from_le_bytes(u32_buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u32_buf)
            .map_err(|e| format_err(format!("truncated payload: {e}")))?;
        data.push(f32::from_le_bytes(u32_buf));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err("trailing bytes after payload".into()));
    }
    Tensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.xbev");
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn bad_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.xbev");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        match read_tensor(&path) {
            Err(Error::Format { file, message }) => {
                assert!(file.ends_with("bad.xbev"));
                assert!(message.contains("bad magic"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.xbev");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn byte_layout_is_pinned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pin.xbev");
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"XBEV");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expect);
    }
}
