//! Little-endian byte reading shared by the on-disk formats.

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated: wanted {n} bytes at offset {}, body ends at {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn tensor4(&mut self) -> Result<Tensor4> {
        let at = self.pos;
        let kh = self.u32()? as usize;
        let kw = self.u32()? as usize;
        let cin = self.u32()? as usize;
        let cout = self.u32()? as usize;
        let n = kh
            .checked_mul(kw)
            .and_then(|v| v.checked_mul(cin))
            .and_then(|v| v.checked_mul(cout))
            .ok_or_else(|| Error::Format(format!("tensor dims overflow at offset {at}")))?;
        if n * 4 > self.buf.len() {
            return Err(Error::Format(format!(
                "tensor block of {n} values at offset {at} exceeds file size"
            )));
        }
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(self.f32()? as f64);
        }
        Tensor4::new(kh, kw, cin, cout, data)
            .map_err(|e| Error::Format(format!("bad tensor block at offset {at}: {e}")))
    }
}

