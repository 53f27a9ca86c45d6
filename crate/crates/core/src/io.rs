//! Little-endian binary containers shared by trajectories, checkpoints and
//! datasets.
//!
//! Every container starts with a 16-byte header: an 8-byte magic tag, a
//! little-endian `u32` format version and a little-endian `u32` reserved word
//! (currently zero). Payloads are sequences of `u64` and `f64` values, also
//! little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grad::Tensor;

pub const HEADER_LEN: usize = 16;

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_header(magic: &[u8; 8], version: u32) -> Self {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(magic);
        w.buf.extend_from_slice(&version.to_le_bytes());
        w.buf.extend_from_slice(&0u32.to_le_bytes());
        w
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        for v in vs {
            self.f64(*v);
        }
        self
    }

    /// Length-prefixed UTF-8 string.
    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    /// Rank, dims, then data.
    pub fn tensor(&mut self, t: &Tensor) -> &mut Self {
        self.u64(t.shape().len() as u64);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        self.f64s(t.data())
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        write_atomic(path, &self.buf)
    }
}

pub struct ByteReader<'a> {
    what: &'a str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Validates the header and returns a reader positioned after it.
    pub fn open(what: &'a str, buf: &'a [u8], magic: &[u8; 8], version: u32) -> Result<Self> {
        if buf.len() < HEADER_LEN {
            return Err(Error::format(what, "truncated header"));
        }
        if &buf[..8] != magic {
            return Err(Error::format(what, "bad magic"));
        }
        let found = u32::from_le_bytes(buf[8..12].try_into().unwrap());
        if found != version {
            return Err(Error::format(
                what,
                format!("unsupported version {found}, expected {version}"),
            ));
        }
        Ok(ByteReader {
            what,
            buf,
            pos: HEADER_LEN,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.what, "unexpected end of data"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::format(self.what, "size overflow"))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::format(self.what, "size overflow"))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::format(self.what, "invalid utf-8"))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.usize()?;
        if rank == 0 || rank > 8 {
            return Err(Error::format(self.what, format!("bad tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.usize()?);
        }
        let n = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let n = n.ok_or_else(|| Error::format(self.what, "size overflow"))?;
        let data = self.f64s(n)?;
        Tensor::new(&shape, data).map_err(|e| Error::format(self.what, e.to_string()))
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.what,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temp file and rename, so readers never observe a
/// partially written file. Skips the write when the content is unchanged.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(());
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload_round_trip() {
        let t = Tensor::new(&[2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap();
        let mut w = ByteWriter::with_header(b"TESTFMT\0", 3);
        w.u64(42).f64(0.5).str("hello").tensor(&t);
        let bytes = w.finish();
        assert_eq!(&bytes[..8], b"TESTFMT\0");
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());

        let mut r = ByteReader::open("test", &bytes, b"TESTFMT\0", 3).unwrap();
        assert_eq!(r.u64().unwrap(), 42);
        assert_eq!(r.f64().unwrap(), 0.5);
        assert_eq!(r.str().unwrap(), "hello");
        assert_eq!(r.tensor().unwrap(), t);
        r.finish().unwrap();

        assert!(ByteReader::open("test", &bytes, b"OTHERFMT", 3).is_err());
        assert!(ByteReader::open("test", &bytes, b"TESTFMT\0", 4).is_err());
        let mut r = ByteReader::open("test", &bytes[..32], b"TESTFMT\0", 3).unwrap();
        r.u64().unwrap();
        assert!(r.f64().is_ok());
        assert!(r.str().is_err());
    }
}
