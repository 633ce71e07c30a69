//! Little-endian framing helpers for the on-disk containers.

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error, PartialEq)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static [u8] },
    #[error("unsupported container version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },
    #[error("container truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("malformed container: {0}")]
    Malformed(String),
}

#[derive(Default)]
pub(crate) struct Writer {
    pub(crate) buf: Vec<u8>,
}

impl Writer {
    pub(crate) fn header(magic: &[u8], version: u16) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u16(version);
        w
    }

    pub(crate) fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub(crate) fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    /// rank (u32), dims (u64 each), then the f64 payload.
    pub(crate) fn array(&mut self, shape: &[usize], data: &[f64]) {
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        self.buf.reserve(data.len() * 8);
        for v in data {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub(crate) fn tensor(&mut self, t: &Tensor) {
        self.array(t.shape(), t.data());
    }
}

pub(crate) struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn open(
        data: &'a [u8],
        magic: &'static [u8],
        version: u16,
    ) -> Result<Self, FormatError> {
        if data.len() < magic.len() || &data[..magic.len()] != magic {
            return Err(FormatError::BadMagic { expected: magic });
        }
        let mut r = Self {
            data,
            at: magic.len(),
        };
        let found = r.u16("version")?;
        if found != version {
            return Err(FormatError::UnsupportedVersion {
                found,
                supported: version,
            });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or(FormatError::Truncated { what })?;
        let out = &self.data[self.at..end];
        self.at = end;
        Ok(out)
    }

    pub(crate) fn u16(&mut self, what: &'static str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &'static str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn bytes(&mut self, what: &'static str) -> Result<&'a [u8], FormatError> {
        let len = self.u64(what)?;
        self.take(
            usize::try_from(len).map_err(|_| FormatError::Truncated { what })?,
            what,
        )
    }

    pub(crate) fn tensor(&mut self, what: &'static str) -> Result<Tensor, FormatError> {
        let rank = self.u32(what)? as usize;
        if rank > 16 {
            return Err(FormatError::Malformed(format!("{what}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64(what)? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("{what}: shape overflow")))?;
        let raw = self.take(
            len.checked_mul(8).ok_or(FormatError::Truncated { what })?,
            what,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| FormatError::Malformed(e.to_string()))
    }

    pub(crate) fn finish(&self) -> Result<(), FormatError> {
        if self.at != self.data.len() {
            return Err(FormatError::Malformed(format!(
                "{} trailing bytes",
                self.data.len() - self.at
            )));
        }
        Ok(())
    }
}
