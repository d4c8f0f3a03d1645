//! Little-endian binary helpers shared by the dictionary, checkpoint and
//! map file formats. Checksummed formats end with an FNV-1a hash of every
//! preceding byte.

use std::hash::Hasher;

use fnv::FnvHasher;

use crate::error::{Error, Result};

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

#[derive(Debug, Default)]
pub(crate) struct ByteWriter {
    pub buf: Vec<u8>,
}

impl ByteWriter {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            buf: Vec::with_capacity(n),
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    /// Appends the checksum of everything written so far.
    pub fn finish_checksummed(mut self) -> Vec<u8> {
        let sum = fnv1a(&self.buf);
        self.bytes(&sum.to_le_bytes());
        self.buf
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Corrupt(format!(
                    "unexpected end of data at byte {} (wanted {n} more)",
                    self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<()> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(Error::Corrupt(format!("{n} trailing bytes after payload"))),
        }
    }
}

/// Checks magic and version, returning a reader positioned after them.
pub(crate) fn open_header<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
) -> Result<ByteReader<'a>> {
    let found = &bytes[..bytes.len().min(4)];
    if found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(found).into_owned(),
        });
    }
    let mut r = ByteReader::new(bytes);
    r.take(4)?;
    let found = r.u32()?;
    if found != version {
        return Err(Error::UnsupportedVersion {
            expected: version,
            found,
        });
    }
    Ok(r)
}

/// Like [`open_header`] but also verifies the trailing checksum; the
/// returned reader excludes the checksum bytes.
pub(crate) fn open_checksummed<'a>(
    bytes: &'a [u8],
    magic: &[u8; 4],
    version: u32,
) -> Result<ByteReader<'a>> {
    open_header(bytes, magic, version)?;
    if bytes.len() < 16 {
        return Err(Error::ChecksumMismatch {
            stored: 0,
            computed: fnv1a(bytes),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let mut r = ByteReader::new(payload);
    r.take(8)?;
    Ok(r)
}
