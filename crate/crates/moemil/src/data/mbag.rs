//! MBAG bag container: fixed-layout binary, little-endian throughout.
//!
//! ```text
//! magic "MBAG" | u32 version (=1) | u32 R | u32 D_in | u32 N | u32 label
//! u16 slide_id length | slide_id UTF-8
//! N records:
//!   u8 level | u8 path length | path (u16 each) | u16 row | u16 col
//!   D_in x f32 features
//! ```
//!
//! The decoder bounds-checks every field against the remaining bytes,
//! reports the byte offset of the first problem, and validates the
//! decoded records as a hierarchy before returning; mutated input either
//! decodes to a valid bag or fails with a structured error.

use super::{Bag, BagRecord};
use crate::error::{Error, Result};
use std::fs;
use std::path::Path;

pub const MBAG_MAGIC: [u8; 4] = *b"MBAG";
pub const MBAG_VERSION: u32 = 1;

/// Caps R (levels must fit the u8 record field).
const MAX_LEVELS: u32 = 255;
/// Sanity cap on feature width.
const MAX_D_IN: u32 = 1 << 20;

pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    bag.validate()?;
    if bag.slide_id.len() > u16::MAX as usize {
        return Err(Error::contract("slide_id longer than 65535 bytes"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(&MBAG_MAGIC);
    out.extend_from_slice(&MBAG_VERSION.to_le_bytes());
    out.extend_from_slice(&(bag.levels as u32).to_le_bytes());
    out.extend_from_slice(&(bag.d_in as u32).to_le_bytes());
    out.extend_from_slice(&(bag.records.len() as u32).to_le_bytes());
    out.extend_from_slice(&(bag.label as u32).to_le_bytes());
    out.extend_from_slice(&(bag.slide_id.len() as u16).to_le_bytes());
    out.extend_from_slice(bag.slide_id.as_bytes());
    for rec in &bag.records {
        out.push(rec.level);
        out.push(rec.path.len() as u8);
        for &c in &rec.path {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out.extend_from_slice(&rec.coord.0.to_le_bytes());
        out.extend_from_slice(&rec.coord.1.to_le_bytes());
        for &f in &rec.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_bag(bag: &Bag, path: &Path) -> Result<()> {
    let bytes = encode_bag(bag)?;
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a str,
}

impl<'a> Cursor<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            offset: self.pos as u64,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated: need {n} bytes for {what}, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a bag from bytes; `origin` names the source in errors.
pub fn decode_bag(buf: &[u8], origin: &str) -> Result<Bag> {
    let mut c = Cursor { buf, pos: 0, origin };
    let magic = c.take(4, "magic")?;
    if magic != MBAG_MAGIC {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: 0,
            reason: format!("bad magic {magic:02x?}, expected \"MBAG\""),
        });
    }
    let version = c.u32("version")?;
    if version != MBAG_VERSION {
        return Err(Error::Format {
            path: origin.to_string(),
            offset: 4,
            reason: format!("unsupported version {version}"),
        });
    }
    let levels = c.u32("level count")?;
    if levels == 0 || levels > MAX_LEVELS {
        return Err(c.fail(format!("level count {levels} outside 1..={MAX_LEVELS}")));
    }
    let d_in = c.u32("feature width")?;
    if d_in == 0 || d_in > MAX_D_IN {
        return Err(c.fail(format!("feature width {d_in} outside 1..={MAX_D_IN}")));
    }
    let n = c.u32("token count")?;
    let label = c.u32("label")?;
    let id_len = c.u16("slide_id length")? as usize;
    let id_bytes = c.take(id_len, "slide_id")?;
    let slide_id = std::str::from_utf8(id_bytes)
        .map_err(|_| c.fail("slide_id is not valid UTF-8"))?
        .to_string();

    // cheapest possible record is level 1 with a single path component
    let min_record = 1 + 1 + 2 + 2 + 2 + 4 * d_in as usize;
    let remaining = buf.len() - c.pos;
    if (n as usize).saturating_mul(min_record) > remaining {
        return Err(c.fail(format!(
            "token count {n} cannot fit in {remaining} remaining bytes"
        )));
    }

    let mut records = Vec::with_capacity(n as usize);
    for i in 0..n {
        let level = c.u8(&format!("record {i} level"))?;
        let path_len = c.u8(&format!("record {i} path length"))? as usize;
        if path_len != level as usize {
            return Err(c.fail(format!(
                "record {i}: path length {path_len} does not match level {level}"
            )));
        }
        let mut path = Vec::with_capacity(path_len);
        for _ in 0..path_len {
            path.push(c.u16(&format!("record {i} path"))?);
        }
        let row = c.u16(&format!("record {i} row"))?;
        let col = c.u16(&format!("record {i} col"))?;
        let mut features = Vec::with_capacity(d_in as usize);
        for _ in 0..d_in {
            features.push(c.f32(&format!("record {i} features"))?);
        }
        records.push(BagRecord {
            level,
            path,
            coord: (row, col),
            features,
        });
    }
    if c.pos != buf.len() {
        return Err(c.fail(format!("{} trailing bytes after last record", buf.len() - c.pos)));
    }

    let bag = Bag {
        slide_id,
        label: label as usize,
        levels: levels as u8,
        d_in: d_in as usize,
        records,
    };
    // structural validation: misparsed trees are rejected, not returned
    bag.validate().map_err(|e| Error::Format {
        path: origin.to_string(),
        offset: 0,
        reason: e.to_string(),
    })?;
    Ok(bag)
}

pub fn read_bag(path: &Path) -> Result<Bag> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_bag(&bytes, &path.display().to_string())
}
