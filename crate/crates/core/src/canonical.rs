//! Canonical byte serialization: little-endian, length-prefixed, fixed-point
//! values as raw 64-bit integers. Used for envelope payloads, commitments and
//! outcome comparison.

use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::fixed::Fixed;

pub type Digest32 = [u8; 32];

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
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

    pub fn fixed(&mut self, v: Fixed) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn fixeds(&mut self, vs: &[Fixed]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.fixed(*v);
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn raw(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn seq<T: CanonicalEncode>(&mut self, items: &[T]) {
        self.u32(items.len() as u32);
        for it in items {
            it.encode(self);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.remaining() < len {
            return Err(CoreError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
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

    pub fn fixed(&mut self) -> Result<Fixed> {
        Ok(Fixed::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn fixeds(&mut self) -> Result<Vec<Fixed>> {
        let len = self.len_prefix(8)?;
        (0..len).map(|_| self.fixed()).collect()
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.len_prefix(1)?;
        self.take(len)
    }

    pub fn seq<T: CanonicalDecode>(&mut self) -> Result<Vec<T>> {
        let len = self.len_prefix(1)?;
        (0..len).map(|_| T::decode(self)).collect()
    }

    /// Reads a length prefix, rejecting lengths the remaining input cannot hold.
    fn len_prefix(&mut self, min_item: usize) -> Result<usize> {
        let len = self.u32()? as usize;
        if len.saturating_mul(min_item) > self.remaining() {
            return Err(CoreError::Truncated);
        }
        Ok(len)
    }

    pub fn finish(self) -> Result<()> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(CoreError::TrailingBytes(self.remaining()))
        }
    }
}

pub trait CanonicalEncode {
    fn encode(&self, w: &mut Writer);
}

pub trait CanonicalDecode: Sized {
    fn decode(r: &mut Reader<'_>) -> Result<Self>;
}

pub fn to_canonical<T: CanonicalEncode + ?Sized>(value: &T) -> Vec<u8> {
    let mut w = Writer::new();
    value.encode(&mut w);
    w.finish()
}

/// Decodes a complete buffer; trailing bytes are an error.
pub fn from_canonical<T: CanonicalDecode>(bytes: &[u8]) -> Result<T> {
    let mut r = Reader::new(bytes);
    let v = T::decode(&mut r)?;
    r.finish()?;
    Ok(v)
}

/// SHA-256 over `domain ‖ 0x00 ‖ data`.
pub fn digest(domain: &str, data: &[u8]) -> Digest32 {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(data);
    h.finalize().into()
}

pub fn canonical_digest<T: CanonicalEncode + ?Sized>(domain: &str, value: &T) -> Digest32 {
    digest(domain, &to_canonical(value))
}

impl CanonicalEncode for Fixed {
    fn encode(&self, w: &mut Writer) {
        w.fixed(*self);
    }
}

impl CanonicalDecode for Fixed {
    fn decode(r: &mut Reader<'_>) -> Result<Self> {
        r.fixed()
    }
}
