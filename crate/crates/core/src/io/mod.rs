//! File formats: rig JSON, MPI containers, weights and checkpoints, PNG
//! images, and the small argument grammars shared by the command line.

pub mod args;
pub mod container;
pub mod png;
pub mod rig;
pub mod scene;
pub mod weights;

pub use container::{decode_mpi, encode_mpi, read_mpi, write_mpi, MPI_MAGIC, MPI_VERSION};
pub use png::{read_png, write_png};
pub use rig::{read_rig, write_rig, RigFile};
pub use scene::{load_scene_dir, write_scene_file, SceneFile, SCENE_FILE};
pub use weights::{
    decode_tensors, decode_weights, encode_tensors, encode_weights, read_checkpoint, read_weights,
    sidecar_path, write_checkpoint, write_weights, Checkpoint, TensorEntry, WEIGHTS_MAGIC, WEIGHTS_VERSION,
};

use crate::error::{Error, Result};

/// Bounds-checked little-endian reader over a byte slice.
pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// `count` little-endian f32 values; the length is checked before allocating.
    pub(crate) fn f32s(&mut self, count: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what} is too large")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn finish(&self, what: &str) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!("{} trailing bytes after {what}", self.remaining())));
        }
        Ok(())
    }
}
