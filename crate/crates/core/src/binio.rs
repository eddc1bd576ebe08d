//! Little-endian binary encoding shared by every artifact file, plus atomic
//! file replacement.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::{Error, Real, Result};

#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut e = Self { buf: Vec::new() };
        e.buf.extend_from_slice(magic);
        e.u32(version);
        e
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i64(&mut self, v: i64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    /// Real values, preceded by the element width in bytes.
    pub fn reals(&mut self, v: &[Real]) {
        self.u8(std::mem::size_of::<Real>() as u8);
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    pub fn u32s(&mut self, v: &[u32]) {
        self.u64(v.len() as u64);
        for x in v {
            self.u32(*x);
        }
    }

    pub fn i64s(&mut self, v: &[i64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.i64(*x);
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], path: &str, magic: &[u8; 8], max_version: u32) -> Result<(Self, u32)> {
        let mut d = Self {
            buf,
            pos: 0,
            path: path.to_string(),
        };
        let m = d.take(8)?;
        if m != magic {
            return Err(d.err("bad magic"));
        }
        let version = d.u32()?;
        if version == 0 || version > max_version {
            return Err(d.err(&format!("unsupported version {version}")));
        }
        Ok((d, version))
    }

    pub fn err(&self, msg: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            msg: format!("{msg} (at byte {})", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.err("truncated file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn slice(&self, start: usize, end: usize) -> &'a [u8] {
        &self.buf[start..end]
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8"))
    }

    fn count(&mut self, width: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.checked_mul(width).is_none_or(|b| self.pos + b > self.buf.len()) {
            return Err(self.err("array length exceeds file"));
        }
        Ok(n)
    }

    /// Reads values written by [`Encoder::reals`] at either precision.
    pub fn reals(&mut self) -> Result<Vec<Real>> {
        let width = self.u8()? as usize;
        let n = self.count(width)?;
        let raw = self.take(n * width)?;
        match width {
            4 => Ok(raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()),
            8 => Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
                .collect()),
            _ => Err(self.err(&format!("unsupported real width {width}"))),
        }
    }

    pub fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.count(4)?;
        (0..n).map(|_| self.u32()).collect()
    }

    pub fn i64s(&mut self) -> Result<Vec<i64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.i64()).collect()
    }
}

/// Short hex digest used as an artifact or checkpoint id.
pub fn digest_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}
