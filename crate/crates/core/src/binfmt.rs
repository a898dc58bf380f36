//! Little-endian binary encoding helpers shared by the weight checkpoint
//! and reference database formats. The reader tracks its byte offset so
//! truncation and corruption errors can name the failing position.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub struct Reader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    pub fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            msg: format!("truncated while reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// Reads a 4-byte magic and checks it. Returns Ok(false) only at clean
    /// EOF before any byte was read.
    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf, "magic bytes")?;
        if &buf != magic {
            return Err(Error::Format {
                offset: 0,
                msg: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf, what)?;
        Ok(u32::from_le_bytes(buf))
    }

    pub fn f32(&mut self, what: &str) -> Result<f32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf, what)?;
        Ok(f32::from_le_bytes(buf))
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.fill(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Length-prefixed (u32) UTF-8 string.
    pub fn string(&mut self, what: &str) -> Result<String> {
        let len = self.u32(what)? as usize;
        let at = self.offset;
        let mut bytes = vec![0u8; len];
        self.fill(&mut bytes, what)?;
        String::from_utf8(bytes).map_err(|e| Error::Format {
            offset: at,
            msg: format!("{what} is not valid UTF-8: {e}"),
        })
    }

    /// Reads a u32, or returns None at a clean end of stream (no bytes left).
    /// A partial value is a truncation error.
    pub fn maybe_u32(&mut self, what: &str) -> Result<Option<u32>> {
        let mut first = [0u8; 1];
        match self.inner.read(&mut first) {
            Ok(0) => return Ok(None),
            Ok(_) => self.offset += 1,
            Err(e) => {
                return Err(Error::Format {
                    offset: self.offset,
                    msg: format!("read failed: {e}"),
                })
            }
        }
        let mut rest = [0u8; 3];
        self.fill(&mut rest, what)?;
        Ok(Some(u32::from_le_bytes([first[0], rest[0], rest[1], rest[2]])))
    }
}

pub struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    pub fn new(inner: W) -> Self {
        Writer { inner }
    }

    fn put(&mut self, bytes: &[u8]) -> Result<()> {
        self.inner.write_all(bytes).map_err(|e| Error::Format {
            offset: 0,
            msg: format!("write failed: {e}"),
        })
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        self.put(magic)
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.put(&v.to_le_bytes())
    }

    pub fn f32_slice(&mut self, vs: &[f32]) -> Result<()> {
        for &v in vs {
            self.f32(v)?;
        }
        Ok(())
    }

    pub fn string(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.put(s.as_bytes())
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::Format {
            offset: 0,
            msg: format!("flush failed: {e}"),
        })
    }
}
