//! The MPNW tensor file used for network weights and checkpoints.
//!
//! Layout: magic, version (u32), manifest length (u32), JSON manifest, then
//! the tensors as little-endian f32 in manifest order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{AdamState, NetworkParams};
use crate::training::CheckpointMeta;

use super::Cursor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"MPNW";
pub const WEIGHTS_VERSION: u32 = 1;

const MAX_MANIFEST: usize = 1 << 22;
const FIRST_MOMENT: &str = "adam_m/";
const SECOND_MOMENT: &str = "adam_v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the data section, in f32 elements.
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<TensorEntry>,
}

pub fn encode_tensors(tensors: &[(String, Vec<usize>, &[f32])]) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0;
    for (name, shape, data) in tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("tensor {name} does not match its shape {shape:?}")));
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
        });
        offset += data.len();
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries })?;
    let len = u32::try_from(manifest.len()).map_err(|_| Error::Shape("manifest too large".into()))?;
    let mut out = Vec::with_capacity(12 + manifest.len() + offset * 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&manifest);
    for (_, _, data) in tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(Error::Format("not an MPNW weights file".into()));
    }
    let version = cur.u32("version")?;
    if version != WEIGHTS_VERSION {
        return Err(Error::Format(format!("unsupported MPNW version {version}")));
    }
    let len = cur.u32("manifest length")? as usize;
    if len > MAX_MANIFEST {
        return Err(Error::Format(format!("manifest of {len} bytes is too large")));
    }
    let manifest: Manifest = serde_json::from_slice(cur.take(len, "manifest")?)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    let mut expected = 0usize;
    for entry in manifest.tensors {
        if entry.offset != expected {
            return Err(Error::Format(format!(
                "tensor {} starts at {}, expected {expected}",
                entry.name, entry.offset
            )));
        }
        let count = entry
            .shape
            .iter()
            .try_fold(1usize, |a, &b| a.checked_mul(b))
            .ok_or_else(|| Error::Format(format!("shape of {} overflows", entry.name)))?;
        let data = cur.f32s(count, &entry.name)?;
        expected += count;
        out.push((entry.name, entry.shape, data));
    }
    cur.finish("the tensors")?;
    Ok(out)
}

/// Fills the architecture's tensors by name; every tensor must be present
/// exactly once with the right shape. With an empty `prefix` the optimizer
/// moments are skipped; otherwise only names under `prefix` are read.
fn fill(target: &mut NetworkParams<f32>, tensors: &[(String, Vec<usize>, Vec<f32>)], prefix: &str) -> Result<()> {
    let mut slots = target.tensors_mut();
    let mut seen = vec![false; slots.len()];
    for (name, shape, data) in tensors {
        let is_moment = name.starts_with(FIRST_MOMENT) || name.starts_with(SECOND_MOMENT);
        let Some(bare) = name.strip_prefix(prefix).filter(|_| prefix.is_empty() != is_moment) else {
            continue;
        };
        let Some(i) = slots.iter().position(|s| s.0 == bare) else {
            return Err(Error::Format(format!("unknown tensor {name}")));
        };
        if seen[i] {
            return Err(Error::Format(format!("tensor {name} appears twice")));
        }
        if *shape != slots[i].1 {
            return Err(Error::Format(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                slots[i].1
            )));
        }
        slots[i].2.copy_from_slice(data);
        seen[i] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::Format(format!("missing tensor {prefix}{}", slots[i].0)));
    }
    Ok(())
}

pub fn encode_weights(params: &NetworkParams<f32>) -> Result<Vec<u8>> {
    params.validate()?;
    encode_tensors(&params.tensors())
}

/// Network weights; optimizer moments stored alongside are ignored.
pub fn decode_weights(bytes: &[u8]) -> Result<NetworkParams<f32>> {
    let tensors = decode_tensors(bytes)?;
    let mut params = NetworkParams::architecture();
    fill(&mut params, &tensors, "")?;
    Ok(params)
}

pub fn write_weights(path: impl AsRef<Path>, params: &NetworkParams<f32>) -> Result<()> {
    std::fs::write(path, encode_weights(params)?)?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<NetworkParams<f32>> {
    decode_weights(&std::fs::read(path)?)
}

/// Everything needed to continue a training run.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: NetworkParams<f32>,
    pub adam: AdamState<f32>,
    pub meta: CheckpointMeta,
}

/// `weights.mpnw` -> `weights.mpnw.json`.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut name = weights.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}

/// Writes the weights file (with Adam moments appended) and its JSON sidecar.
pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let m = ckpt.adam.first_moment.tensors();
    let v = ckpt.adam.second_moment.tensors();
    let mut all = ckpt.params.tensors();
    all.extend(m.into_iter().map(|(n, s, d)| (format!("{FIRST_MOMENT}{n}"), s, d)));
    all.extend(v.into_iter().map(|(n, s, d)| (format!("{SECOND_MOMENT}{n}"), s, d)));
    std::fs::write(path, encode_tensors(&all)?)?;
    let mut sidecar = serde_json::to_string_pretty(&ckpt.meta)?;
    sidecar.push('\n');
    std::fs::write(sidecar_path(path), sidecar)?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let tensors = decode_tensors(&std::fs::read(path)?)?;
    let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
    let mut params = NetworkParams::architecture();
    fill(&mut params, &tensors, "")?;
    let mut adam = AdamState::new(&params, meta.config.adam);
    fill(&mut adam.first_moment, &tensors, FIRST_MOMENT)
        .and_then(|_| fill(&mut adam.second_moment, &tensors, SECOND_MOMENT))
        .map_err(|e| Error::Format(format!("checkpoint moments: {e}")))?;
    adam.step_count = meta.adam_steps;
    Ok(Checkpoint { params, adam, meta })
}
