//! The MPIV container: a header with the reference camera and plane depths,
//! then every plane as little-endian f32 RGBA, back to front.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{CameraRecord, DepthPlanes, PinholeCamera};
use crate::render::Mpi;
use crate::tensor::{Dims, Volume};

use super::Cursor;

pub const MPI_MAGIC: &[u8; 4] = b"MPIV";
pub const MPI_VERSION: u32 = 1;

/// Largest accepted reference-camera JSON blob.
const MAX_CAMERA_JSON: usize = 1 << 20;

pub fn encode_mpi(mpi: &Mpi<f32>) -> Result<Vec<u8>> {
    let dims = mpi.dims();
    if mpi.data.channels != 4 || dims.depth != mpi.planes.len() {
        return Err(Error::Shape("MPI volume does not match its planes".into()));
    }
    if dims.width != mpi.reference.width || dims.height != mpi.reference.height {
        return Err(Error::Shape("MPI size differs from its reference camera".into()));
    }
    let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Shape(format!("dimension {v} exceeds u32")));
    let camera = serde_json::to_vec(&CameraRecord::from(&mpi.reference))?;
    let mut out = Vec::with_capacity(32 + camera.len() + dims.depth * 8 + mpi.data.data.len() * 4);
    out.extend_from_slice(MPI_MAGIC);
    out.extend_from_slice(&MPI_VERSION.to_le_bytes());
    for v in [dims.width, dims.height, dims.depth, camera.len()] {
        out.extend_from_slice(&to_u32(v)?.to_le_bytes());
    }
    out.extend_from_slice(&camera);
    for &z in mpi.planes.depths() {
        out.extend_from_slice(&z.to_le_bytes());
    }
    for &v in &mpi.data.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mpi(bytes: &[u8]) -> Result<Mpi<f32>> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4, "magic")? != MPI_MAGIC {
        return Err(Error::Format("not an MPIV container".into()));
    }
    let version = cur.u32("version")?;
    if version != MPI_VERSION {
        return Err(Error::Format(format!("unsupported MPIV version {version}")));
    }
    let (w, h, d) = (
        cur.u32("width")? as usize,
        cur.u32("height")? as usize,
        cur.u32("depth")? as usize,
    );
    let json_len = cur.u32("camera length")? as usize;
    if json_len > MAX_CAMERA_JSON {
        return Err(Error::Format(format!("camera blob of {json_len} bytes is too large")));
    }
    let record: CameraRecord = serde_json::from_slice(cur.take(json_len, "reference camera")?)?;
    let reference = PinholeCamera::try_from(record).map_err(|e| Error::Format(e.to_string()))?;
    if reference.width != w || reference.height != h {
        return Err(Error::Format(format!(
            "header size {w}x{h} differs from the camera's {}x{}",
            reference.width, reference.height
        )));
    }
    let depth_bytes = d.checked_mul(8).ok_or_else(|| Error::Format("plane count overflows".into()))?;
    if depth_bytes > cur.remaining() {
        return Err(Error::Format("truncated while reading depths".into()));
    }
    let depths = (0..d).map(|_| cur.f64("depths")).collect::<Result<Vec<_>>>()?;
    let planes = DepthPlanes::from_depths(&depths).map_err(|e| Error::Format(e.to_string()))?;
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(d))
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| Error::Format("volume size overflows".into()))?;
    let data = cur.f32s(count, "planes")?;
    cur.finish("the planes")?;
    Ok(Mpi {
        data: Volume::from_vec(Dims::new(w, h, d), 4, data)?,
        planes,
        reference,
    })
}

pub fn write_mpi(path: impl AsRef<Path>, mpi: &Mpi<f32>) -> Result<()> {
    std::fs::write(path, encode_mpi(mpi)?)?;
    Ok(())
}

pub fn read_mpi(path: impl AsRef<Path>) -> Result<Mpi<f32>> {
    decode_mpi(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::make_depth_planes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_mpi(seed: u64) -> Mpi<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = make_depth_planes(5, f64::INFINITY, 1.25).unwrap();
        let reference = PinholeCamera::centered(12.0, 12, 8, "ref");
        let dims = Dims::new(12, 8, 5);
        let data = (0..dims.voxels() * 4).map(|_| rng.random::<f32>()).collect();
        Mpi {
            data: Volume::from_vec(dims, 4, data).unwrap(),
            planes,
            reference,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mpi = sample_mpi(1);
        let bytes = encode_mpi(&mpi).unwrap();
        let back = decode_mpi(&bytes).unwrap();
        assert_eq!(back.data, mpi.data);
        assert_eq!(back.planes, mpi.planes);
        assert_eq!(back.reference, mpi.reference);
        assert_eq!(encode_mpi(&back).unwrap(), bytes);
    }

    #[test]
    fn infinite_far_plane_uses_the_ieee_pattern() {
        let mpi = sample_mpi(2);
        let bytes = encode_mpi(&mpi).unwrap();
        let json_len = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let first = &bytes[24 + json_len..32 + json_len];
        assert_eq!(first, &0x7ff0_0000_0000_0000u64.to_le_bytes());
        assert_eq!(decode_mpi(&bytes).unwrap().planes.depths()[0], f64::INFINITY);
    }

    #[test]
    fn planes_are_stored_back_to_front() {
        let mut mpi = sample_mpi(3);
        mpi.data.data.iter_mut().for_each(|v| *v = 0.0);
        *mpi.data.at_mut(0, 0, 0, 0) = 7.0;
        let bytes = encode_mpi(&mpi).unwrap();
        let payload = bytes.len() - mpi.data.data.len() * 4;
        assert_eq!(&bytes[payload..payload + 4], &7.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = encode_mpi(&sample_mpi(4)).unwrap();
        assert!(decode_mpi(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_mpi(&extra).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(decode_mpi(&magic).is_err());
        let mut version = bytes.clone();
        version[4] = 9;
        assert!(decode_mpi(&version).is_err());
        let mut huge = bytes.clone();
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_mpi(&huge).is_err());
        assert!(decode_mpi(&[]).is_err());
    }
}
