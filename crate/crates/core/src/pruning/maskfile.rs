//! `SADM` mask files.
//!
//! ```text
//! "SADM" | version: u8 | method: u8 | s: f64 | seed: u64 | group_count: u32
//! per group: name_len: u32 | name (UTF-8) | n_elements: u64 | ceil(n/8) bytes
//! ```
//!
//! Integers and floats are little-endian; bits are packed LSB-first. The
//! percentile threshold is not stored.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use super::{PruneMask, PruneMethod};
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const MASK_MAGIC: &[u8; 4] = b"SADM";
pub const MASK_VERSION: u8 = 1;

pub fn write_mask(mask: &PruneMask, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MASK_MAGIC);
    buf.push(MASK_VERSION);
    buf.push(mask.method.tag());
    buf.extend_from_slice(&mask.s.to_le_bytes());
    buf.extend_from_slice(&mask.seed.to_le_bytes());
    buf.extend_from_slice(&(mask.bits.len() as u32).to_le_bytes());
    for (name, bits) in &mask.bits {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(bits.len() as u64).to_le_bytes());
        for chunk in bits.chunks(8) {
            buf.push(chunk.iter().enumerate().fold(0u8, |acc, (i, &b)| acc | ((b as u8) << i)));
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_mask(r: impl Read) -> Result<PruneMask> {
    let mut rd = ByteReader::new(r)?;
    rd.expect_magic(MASK_MAGIC)?;
    rd.expect_version(MASK_VERSION)?;
    let offset = rd.offset();
    let tag = rd.u8()?;
    let method = PruneMethod::from_tag(tag).ok_or(Error::Format { offset, reason: format!("unknown method tag {tag}") })?;
    let offset = rd.offset();
    let s = rd.f64()?;
    if !(0.0..1.0).contains(&s) {
        return Err(Error::Format { offset, reason: format!("sparsity {s} outside [0, 1)") });
    }
    let seed = rd.u64()?;
    let count = rd.u32()?;
    let mut bits = BTreeMap::new();
    for _ in 0..count {
        let offset = rd.offset();
        let name = rd.string()?;
        let n = rd.u64()? as usize;
        let packed = rd.take(n.div_ceil(8))?;
        let group: Vec<bool> = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        if bits.insert(name.clone(), group).is_some() {
            return Err(Error::Format { offset, reason: format!("duplicate group `{name}`") });
        }
    }
    rd.expect_end()?;
    PruneMask::from_bits(method, s, seed, bits)
}
