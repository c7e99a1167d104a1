//! `SACP` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SACP" | version: u8 | group_count: u32
//! per group: name_len: u32 | name (UTF-8) | ndim: u32 | dims: u64 × ndim
//!            | trainable: u8 | values: f64 × prod(dims)
//! ```

use std::io::{Read, Write};

use super::Model;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::ByteReader;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

pub fn write_checkpoint(model: &Model, mut w: impl Write) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[CHECKPOINT_VERSION])?;
    w.write_all(&(model.groups().len() as u32).to_le_bytes())?;
    for g in model.groups() {
        let name = g.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(g.shape().len() as u32).to_le_bytes())?;
        for &dim in g.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        w.write_all(&[g.trainable as u8])?;
        for x in g.tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(r: impl Read) -> Result<Vec<CheckpointEntry>> {
    let mut rd = ByteReader::new(r)?;
    rd.expect_magic(CHECKPOINT_MAGIC)?;
    rd.expect_version(CHECKPOINT_VERSION)?;
    let count = rd.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = rd.string()?;
        let ndim = rd.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(rd.u64()? as usize);
        }
        let offset = rd.offset();
        let trainable = match rd.u8()? {
            0 => false,
            1 => true,
            b => return Err(Error::Format { offset, reason: format!("bad trainable flag {b}") }),
        };
        let n: usize = shape.iter().product();
        let data = rd.f64s(n)?;
        let tensor = Tensor::new(shape, data).map_err(|e| Error::Format { offset, reason: e.to_string() })?;
        out.push(CheckpointEntry { name, trainable, tensor });
    }
    rd.expect_end()?;
    Ok(out)
}

impl Model {
    /// Overwrites parameter values and trainable flags from a checkpoint.
    /// Every checkpoint entry must name an existing group of equal shape.
    pub fn load_checkpoint(&mut self, entries: &[CheckpointEntry]) -> Result<()> {
        for e in entries {
            let g = self
                .group(&e.name)
                .ok_or_else(|| Error::Contract(format!("checkpoint group `{}` not in model", e.name)))?;
            if g.shape() != e.tensor.shape() {
                return Err(Error::shape(e.name.clone(), g.shape(), e.tensor.shape()));
            }
        }
        if entries.len() != self.groups().len() {
            return Err(Error::Contract(format!(
                "checkpoint has {} groups, model has {}",
                entries.len(),
                self.groups().len()
            )));
        }
        for e in entries {
            let g = self.group_mut(&e.name).expect("checked above");
            g.tensor = e.tensor.clone();
            g.trainable = e.trainable || g.prunable;
        }
        Ok(())
    }
}
