//! Little-endian readers and writers that track byte offsets for errors.

use std::io::{Read, Write};

use crate::error::{NammError, Result};

pub struct LeWriter<W: Write> {
    inner: W,
}

impl<W: Write> LeWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.inner.write_all(b)?;
        Ok(())
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f32(&mut self, v: f32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64s(&mut self, vs: &[f64]) -> Result<()> {
        let mut buf = Vec::with_capacity(vs.len() * 8);
        for v in vs {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.bytes(&buf)
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub struct LeReader<R: Read> {
    inner: R,
    offset: u64,
}

impl<R: Read> LeReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            match self.inner.read(&mut buf[read..]) {
                Ok(0) => {
                    return Err(NammError::format(
                        self.offset + read as u64,
                        format!("unexpected end of input, needed {} more bytes", buf.len() - read),
                    ))
                }
                Ok(n) => read += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// True when no bytes remain.
    pub fn at_eof(&mut self) -> Result<bool>
    where
        R: std::io::BufRead,
    {
        Ok(self.inner.fill_buf()?.is_empty())
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let start = self.offset;
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        if &buf != expected {
            return Err(NammError::format(
                start,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&buf),
                    String::from_utf8_lossy(expected)
                ),
            ));
        }
        Ok(())
    }

    pub fn u32(&mut self) -> Result<u32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    /// Reads a u32 and checks it against `expected`.
    pub fn expect_u32(&mut self, what: &str, expected: u32) -> Result<()> {
        let at = self.offset;
        let v = self.u32()?;
        if v != expected {
            return Err(NammError::format(at, format!("{what} is {v}, expected {expected}")));
        }
        Ok(())
    }

    pub fn u64(&mut self) -> Result<u64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }

    pub fn f64(&mut self) -> Result<f64> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }

    pub fn f32(&mut self) -> Result<f32> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(f32::from_le_bytes(buf))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut buf = vec![0u8; n * 8];
        self.fill(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let mut buf = vec![0u8; n * 4];
        self.fill(&mut buf)?;
        Ok(buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}
