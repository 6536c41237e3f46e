//! Little-endian byte buffers with a CRC-32 trailer.

use crate::error::{HarnessError, Result};

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(4 * v.len());
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.bytes(&x.to_le_bytes());
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Appends the CRC-32 of everything written so far.
    pub fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks the trailer and returns a reader over the body.
    pub fn checked(buf: &'a [u8]) -> Result<Self> {
        if buf.len() < 4 {
            return Err(HarnessError::Truncated {
                offset: buf.len(),
                needed: 4 - buf.len(),
            });
        }
        let (body, tail) = buf.split_at(buf.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(HarnessError::Checksum { stored, computed });
        }
        Ok(Self { buf: body, pos: 0 })
    }

    /// Reader without a checksum, for peeking at headers.
    pub fn raw(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(HarnessError::Truncated {
                offset: self.pos,
                needed: n - (self.buf.len() - self.pos),
            });
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| HarnessError::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| HarnessError::Format("length overflow".into()))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| HarnessError::Format(e.to_string()))
    }

    pub fn finished(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Reads the magic and version; rejects other magics and other versions.
pub(crate) fn check_header(r: &mut Reader<'_>, magic: &[u8; 4], version: u16) -> Result<()> {
    let found = r.take(4)?;
    if found != magic {
        return Err(HarnessError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.u16()?;
    if v != version {
        return Err(HarnessError::Version {
            found: v,
            expected: version,
        });
    }
    Ok(())
}

/// Validates magic and version before the checksum, so that a file from a
/// different version is reported as such rather than as corruption.
pub(crate) fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], version: u16) -> Result<Reader<'a>> {
    check_header(&mut Reader::raw(bytes), magic, version)?;
    let mut r = Reader::checked(bytes)?;
    r.take(6)?;
    Ok(r)
}
