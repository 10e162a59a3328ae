//! Binary container shared by checkpoints and the dataset cache.
//!
//! ```text
//! "ATRI" | u16 version = 1 | u16 arch tag
//! u32 segment count
//!   per segment: u16 name length | name (UTF-8) | u8 rank | u32 dim × rank
//! u64 value count | f64 × count
//! u32 CRC32 of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATRI";
pub const VERSION: u16 = 1;

pub const TAG_LOGREG: u16 = 1;
pub const TAG_MLP: u16 = 2;
/// Dataset cache files.
pub const TAG_DATA: u16 = 0x4441;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentHeader {
    pub name: String,
    pub shape: Vec<usize>,
}

impl SegmentHeader {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub arch_tag: u16,
    pub segments: Vec<SegmentHeader>,
    pub values: Vec<f64>,
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let total: usize = self.segments.iter().map(SegmentHeader::numel).sum();
        if total != self.values.len() {
            return Err(Error::Shape(format!(
                "layout covers {total} values but {} supplied",
                self.values.len()
            )));
        }
        let mut out = Vec::with_capacity(64 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.arch_tag.to_le_bytes());
        out.extend_from_slice(&(self.segments.len() as u32).to_le_bytes());
        for seg in &self.segments {
            let name = seg.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("segment name too long: {}", seg.name)))?;
            let rank = u8::try_from(seg.shape.len())
                .map_err(|_| Error::Format(format!("segment {} rank too large", seg.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for &d in &seg.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        if bytes.len() < 4 + 4 + 4 + 8 + 4 {
            return Err(Error::Format("truncated header".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let arch_tag = r.u16()?;
        let n_seg = r.u32()? as usize;
        let mut segments = Vec::new();
        for _ in 0..n_seg {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("segment name is not UTF-8".into()))?
                .to_owned();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            segments.push(SegmentHeader { name, shape });
        }
        let count = r.u64()? as usize;
        let expected: usize = segments.iter().map(SegmentHeader::numel).sum();
        if count != expected {
            return Err(Error::Format(format!(
                "value count {count} disagrees with layout ({expected})"
            )));
        }
        let remaining = body.len() - r.pos;
        if remaining != count.saturating_mul(8) {
            return Err(Error::Format(format!(
                "length mismatch: {remaining} payload bytes for {count} values"
            )));
        }
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Format("CRC mismatch".into()));
        }
        let values = r
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Container {
            arch_tag,
            segments,
            values,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
