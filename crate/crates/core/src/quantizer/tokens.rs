//! Token sequences and the `HVTK` token file.
//!
//! Layout, little-endian: magic `"HVTK"`, version `u32`, vocabulary size
//! `u32`, level count `u32`, level resolutions `u32 × L`, scale count `u32`,
//! scales `f64 × N`, number of stored levels `u32`, then every stored index
//! as an unsigned LEB128 varint in level-major, row-major order.

use std::path::Path;

use super::ScaleSchedule;
use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HVTK";
const VERSION: u32 = 1;

/// Index grids for the first `levels_present()` levels of a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    schedule: ScaleSchedule,
    vocab: usize,
    levels: Vec<Vec<u32>>,
}

impl TokenSequence {
    pub fn new(schedule: ScaleSchedule, vocab: usize, levels: Vec<Vec<u32>>) -> Result<Self> {
        if levels.len() > schedule.levels() {
            return Err(Error::Shape(format!("{} levels for a {}-level schedule", levels.len(), schedule.levels())));
        }
        for (l, grid) in levels.iter().enumerate() {
            let r = schedule.resolution(l);
            if grid.len() != r * r {
                return Err(Error::Shape(format!("level {l} has {} indices, expected {}", grid.len(), r * r)));
            }
            if let Some(&bad) = grid.iter().find(|&&k| k as usize >= vocab) {
                return Err(Error::InvalidArgument(format!("index {bad} at level {l} exceeds vocabulary {vocab}")));
            }
        }
        Ok(Self { schedule, vocab, levels })
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.schedule
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn levels_present(&self) -> usize {
        self.levels.len()
    }

    pub fn is_complete(&self) -> bool {
        self.levels.len() == self.schedule.levels()
    }

    pub fn level(&self, l: usize) -> &[u32] {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Vec<u32>] {
        &self.levels
    }

    /// Mutable access for tests and samplers; callers must keep indices
    /// below the vocabulary size.
    pub fn level_mut(&mut self, l: usize) -> &mut [u32] {
        &mut self.levels[l]
    }

    /// The first `levels` level grids.
    pub fn prefix(&self, levels: usize) -> Result<Self> {
        if levels > self.levels.len() {
            return Err(Error::InvalidArgument(format!("prefix of {levels} levels from {}", self.levels.len())));
        }
        Ok(Self {
            schedule: self.schedule.clone(),
            vocab: self.vocab,
            levels: self.levels[..levels].to_vec(),
        })
    }

    pub fn flatten(&self) -> Vec<u32> {
        self.levels.concat()
    }

    pub fn token_count(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.u32(self.vocab as u32);
        w.u32(self.schedule.levels() as u32);
        for &r in self.schedule.resolutions() {
            w.u32(r as u32);
        }
        w.u32(self.schedule.scale_count() as u32);
        w.f64s(self.schedule.scales());
        w.u32(self.levels.len() as u32);
        for &k in self.levels.iter().flatten() {
            w.varint(u64::from(k));
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new("HVTK", bytes);
        r.magic(MAGIC)?;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let vocab = r.u32("vocabulary size")? as usize;
        let n_levels = r.u32("level count")? as usize;
        let mut resolutions = Vec::with_capacity(n_levels.min(1024));
        for _ in 0..n_levels {
            resolutions.push(r.u32("resolution")? as usize);
        }
        let n_scales = r.u32("scale count")? as usize;
        let scales = r.f64s(n_scales, "scales")?;
        let schedule = ScaleSchedule::new(resolutions, scales).map_err(|e| r.error(e.to_string()))?;
        let present = r.u32("stored level count")? as usize;
        if present > schedule.levels() {
            return Err(r.error(format!("{present} stored levels exceed {}", schedule.levels())));
        }
        let mut levels = Vec::with_capacity(present);
        for l in 0..present {
            let n = schedule.resolution(l).pow(2);
            let mut grid = Vec::with_capacity(n);
            for _ in 0..n {
                let k = r.varint("token")?;
                if k >= vocab as u64 {
                    return Err(r.error(format!("token {k} exceeds vocabulary {vocab}")));
                }
                grid.push(k as u32);
            }
            levels.push(grid);
        }
        r.finish()?;
        Self::new(schedule, vocab, levels)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
