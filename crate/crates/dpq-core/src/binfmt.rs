//! Little-endian binary readers and writers shared by the on-disk formats.
//!
//! Every format in this crate follows the same conventions: a 4-byte ASCII
//! magic, a `u32` version, fixed-width little-endian integers, and `f32`
//! payloads. The reader tracks its byte offset so malformed files fail with
//! the exact position of the problem.

use crate::error::{DpqError, Result};

/// Cursor over an in-memory byte buffer with offset-carrying errors.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(DpqError::Format {
                offset: self.pos,
                what: format!(
                    "truncated: need {n} bytes for {what}, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Read and verify a 4-byte ASCII magic.
    pub fn expect_magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != want {
            return Err(DpqError::Format {
                offset: at,
                what: format!(
                    "bad magic: want {:?}, got {:?}",
                    String::from_utf8_lossy(want),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    pub fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn read_u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn read_f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    /// Read `n` consecutive f32 values, widened to f64.
    pub fn read_f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(4 * n, what)?;
        let mut out = Vec::with_capacity(n);
        for chunk in b.chunks_exact(4) {
            out.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        Ok(out)
    }

    pub fn read_bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    /// Fail if any bytes remain unread.
    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(DpqError::Format {
                offset: self.pos,
                what: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

/// Growable little-endian byte sink.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Writer::default()
    }

    pub fn magic(&mut self, m: &[u8; 4]) -> &mut Self {
        self.buf.extend_from_slice(m);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f32(&mut self, v: f32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// Write f64 values truncated to the 32-bit file representation.
    pub fn f32_slice(&mut self, vs: &[f64]) -> &mut Self {
        self.buf.reserve(4 * vs.len());
        for &v in vs {
            self.buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(b);
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_scalars() {
        let mut w = Writer::new();
        w.magic(b"TEST").u32(7).u64(1 << 40).u8(1).f32(1.5);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        assert_eq!(r.read_u32("a").unwrap(), 7);
        assert_eq!(r.read_u64("b").unwrap(), 1 << 40);
        assert_eq!(r.read_u8("c").unwrap(), 1);
        assert_eq!(r.read_f32("d").unwrap(), 1.5);
        r.expect_end().unwrap();
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let bytes = b"NOPE1234".to_vec();
        let mut r = Reader::new(&bytes);
        match r.expect_magic(b"TEST") {
            Err(DpqError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("want format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_failure_offset() {
        let mut w = Writer::new();
        w.magic(b"TEST").u32(1);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        r.read_u32("v").unwrap();
        match r.read_u64("missing") {
            Err(DpqError::Format { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("want format error, got {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut w = Writer::new();
        w.magic(b"TEST").u8(0).u8(0);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        r.read_u8("x").unwrap();
        assert!(matches!(
            r.expect_end(),
            Err(DpqError::Format { offset: 5, .. })
        ));
    }

    #[test]
    fn f32_vec_widens_exactly() {
        let vals = [0.1f64, -2.5, 3.0];
        let mut w = Writer::new();
        w.f32_slice(&vals);
        let bytes = w.into_bytes();
        let mut r = Reader::new(&bytes);
        let back = r.read_f32_vec(3, "vals").unwrap();
        for (a, b) in vals.iter().zip(&back) {
            // Widening f32 -> f64 is exact; only the initial narrowing rounds.
            assert_eq!(*b, *a as f32 as f64);
        }
    }
}
