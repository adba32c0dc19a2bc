//! Little-endian primitives shared by the binary containers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn put_u8(buf: &mut Vec<u8>, v: u8) {
    buf.push(v);
}

pub(crate) fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_str(buf: &mut Vec<u8>, s: &str) {
    put_u32(buf, s.len() as u32);
    buf.extend_from_slice(s.as_bytes());
}

/// Rank, dims, then raw elements in the scalar's own width.
pub(crate) fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(buf, t.rank() as u32);
    for &d in t.shape() {
        put_u32(buf, d as u32);
    }
    match T::DTYPE {
        "f32" => {
            for &v in t.data() {
                buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        _ => {
            for &v in t.data() {
                buf.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
}

/// Bounds-checked reader; every failure is reported as corruption of `what`.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::corrupt(
                self.what,
                format!("truncated: need {n} bytes at offset {}, have {}", self.pos, self.remaining()),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8]) -> Result<()> {
        if self.bytes(magic.len())? != magic {
            return Err(Error::corrupt(self.what, "bad magic"));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::corrupt(self.what, "invalid utf-8"))
    }

    /// Reads a tensor written with element type `dtype`, converting to `T`.
    pub fn tensor<T: Scalar>(&mut self, dtype: &str) -> Result<Tensor<T>> {
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::corrupt(self.what, format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            "f32" => self
                .bytes(n.checked_mul(4).ok_or_else(|| Error::corrupt(self.what, "size overflow"))?)?
                .chunks_exact(4)
                .map(|c| T::cst(f32::from_le_bytes(c.try_into().expect("4")) as f64))
                .collect(),
            "f64" => self
                .bytes(n.checked_mul(8).ok_or_else(|| Error::corrupt(self.what, "size overflow"))?)?
                .chunks_exact(8)
                .map(|c| T::cst(f64::from_le_bytes(c.try_into().expect("8"))))
                .collect(),
            other => return Err(Error::corrupt(self.what, format!("unknown dtype {other}"))),
        };
        Tensor::new(&shape, data)
    }
}
