//! Pinhole cameras, plane-induced homographies and depth-plane layouts.
//!
//! Poses are stored camera-to-rig: `rotation` maps camera axes into the rig
//! frame and `translation` is the camera center in rig coordinates (meters).
//! Pixel coordinates put integer values at pixel centers.

use std::cmp::Ordering;

use nalgebra::{Matrix3, Matrix4, Rotation3, SymmetricEigen, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

const ORTHO_TOL: f64 = 1e-9;

/// Smallest homogeneous `w` accepted by a perspective divide.
pub const MIN_W: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub intrinsics: Matrix3<f64>,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub name: String,
}

impl PinholeCamera {
    /// Builds a camera and checks the intrinsic and rotation invariants.
    pub fn new(
        intrinsics: Matrix3<f64>,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        width: usize,
        height: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            rotation,
            translation,
            width,
            height,
            name: name.into(),
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at the rig origin looking down +z with the given focal length
    /// and the principal point at the image center.
    pub fn centered(focal: f64, width: usize, height: usize, name: impl Into<String>) -> Self {
        let k = Matrix3::new(
            focal,
            0.0,
            (width as f64 - 1.0) / 2.0,
            0.0,
            focal,
            (height as f64 - 1.0) / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self {
            intrinsics: k,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            width,
            height,
            name: name.into(),
        }
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.translation = t;
        self
    }

    pub fn with_rotation(mut self, r: Matrix3<f64>) -> Self {
        self.rotation = r;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !k.iter().all(|v| v.is_finite())
            || !self.rotation.iter().all(|v| v.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(domain!("camera {:?} has non-finite parameters", self.name));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 || k[(2, 2)] != 1.0 {
            return Err(domain!(
                "camera {:?}: intrinsics must be upper-triangular with K[2][2] = 1",
                self.name
            ));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(domain!("camera {:?}: focal lengths must be positive", self.name));
        }
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho > ORTHO_TOL || (r.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(domain!(
                "camera {:?}: rotation is not a proper orthonormal matrix (|R^T R - I| = {ortho:e})",
                self.name
            ));
        }
        if self.width == 0 || self.height == 0 {
            return Err(domain!("camera {:?}: empty image size", self.name));
        }
        Ok(())
    }

    pub fn focal(&self) -> (f64, f64) {
        (self.intrinsics[(0, 0)], self.intrinsics[(1, 1)])
    }

    /// Re-expresses this camera's pose in the coordinate system of `reference`.
    pub fn relative_to(&self, reference: &PinholeCamera) -> PinholeCamera {
        let rt = reference.rotation.transpose();
        PinholeCamera {
            rotation: rt * self.rotation,
            translation: rt * (self.translation - reference.translation),
            ..self.clone()
        }
    }

    /// Ordering key used wherever results must not depend on list order.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        let lhs = self
            .translation
            .iter()
            .chain(self.rotation.iter())
            .chain(self.intrinsics.iter());
        let rhs = other
            .translation
            .iter()
            .chain(other.rotation.iter())
            .chain(other.intrinsics.iter());
        for (a, b) in lhs.zip(rhs) {
            match a.total_cmp(b) {
                Ordering::Equal => continue,
                ord => return ord,
            }
        }
        self.name.cmp(&other.name)
    }
}

/// Plane-induced homography mapping reference pixels to another view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub matrix: Matrix3<f64>,
    pub plane_depth: f64,
}

impl Homography {
    /// Maps a pixel through the homography with perspective divide.
    /// Returns `None` when the point lands behind the camera or at infinity.
    #[inline]
    pub fn map(&self, u: f64, v: f64) -> Option<(f64, f64)> {
        map_point(&self.matrix, u, v)
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.matrix.try_inverse().map(|m| Homography {
            matrix: m,
            plane_depth: self.plane_depth,
        })
    }
}

#[inline]
pub(crate) fn map_point(h: &Matrix3<f64>, u: f64, v: f64) -> Option<(f64, f64)> {
    let w = h[(2, 0)] * u + h[(2, 1)] * v + h[(2, 2)];
    if !(w > MIN_W) {
        return None;
    }
    let x = h[(0, 0)] * u + h[(0, 1)] * v + h[(0, 2)];
    let y = h[(1, 0)] * u + h[(1, 1)] * v + h[(1, 2)];
    Some((x / w, y / w))
}

/// `H_z = K R^T K_r^-1 - (1/z) [0 | K R^T T]` for a view whose pose is
/// already expressed in the reference frame.
pub fn homography_at_depth(
    reference: &PinholeCamera,
    other: &PinholeCamera,
    z: f64,
) -> Result<Homography> {
    if z.is_nan() || z <= 0.0 {
        return Err(domain!("plane depth must be positive, got {z}"));
    }
    // 1/inf == 0 exactly, which drops the translation term.
    homography_at_disparity(reference, other, 1.0 / z)
}

pub(crate) fn homography_at_disparity(
    reference: &PinholeCamera,
    other: &PinholeCamera,
    disparity: f64,
) -> Result<Homography> {
    let kr_inv = reference
        .intrinsics
        .try_inverse()
        .ok_or_else(|| domain!("reference intrinsics are singular"))?;
    let krt = other.intrinsics * other.rotation.transpose();
    let mut h = if other.intrinsics == reference.intrinsics && other.rotation == Matrix3::identity() {
        Matrix3::identity()
    } else {
        krt * kr_inv
    };
    if disparity != 0.0 {
        let shift = krt * other.translation * disparity;
        for row in 0..3 {
            h[(row, 2)] -= shift[row];
        }
    }
    Ok(Homography {
        matrix: h,
        plane_depth: if disparity == 0.0 { f64::INFINITY } else { 1.0 / disparity },
    })
}

/// Homography from `reference` pixels to `view` pixels for the plane at
/// disparity `disparity`, with both poses given in the shared rig frame.
pub fn plane_homography(
    reference: &PinholeCamera,
    view: &PinholeCamera,
    disparity: f64,
) -> Result<Homography> {
    homography_at_disparity(reference, &view.relative_to(reference), disparity)
}

/// Projects a point given in the camera frame; returns `(u, v, depth)`.
pub fn project_point(cam: &PinholeCamera, point: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    if !(point.z > 0.0) {
        return Err(domain!("cannot project point with depth {}", point.z));
    }
    let p = cam.intrinsics * (point / point.z);
    Ok((p.x, p.y, point.z))
}

/// Back-projects pixel `(u, v)` to the camera-frame point at `depth`.
pub fn unproject(cam: &PinholeCamera, u: f64, v: f64, depth: f64) -> Result<Vector3<f64>> {
    if !(depth > 0.0) || !depth.is_finite() {
        return Err(domain!("cannot unproject at depth {depth}"));
    }
    let k_inv = cam
        .intrinsics
        .try_inverse()
        .ok_or_else(|| domain!("intrinsics are singular"))?;
    Ok(k_inv * Vector3::new(u, v, 1.0) * depth)
}

/// Fronto-parallel planes spaced linearly in disparity, back to front.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthPlanes {
    z: Vec<f64>,
    disparity: Vec<f64>,
}

impl DepthPlanes {
    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Depths in meters, `z[0]` the farthest (possibly `+inf`).
    pub fn depths(&self) -> &[f64] {
        &self.z
    }

    pub fn disparities(&self) -> &[f64] {
        &self.disparity
    }

    /// Rebuilds planes from stored depths and checks the spacing invariant.
    pub fn from_depths(depths: &[f64]) -> Result<Self> {
        if depths.len() < 2 {
            return Err(domain!("need at least two depth planes, got {}", depths.len()));
        }
        let disparity: Vec<f64> = depths
            .iter()
            .map(|&z| if z == f64::INFINITY { 0.0 } else { 1.0 / z })
            .collect();
        if depths.iter().any(|z| !(*z > 0.0)) {
            return Err(domain!("plane depths must be positive"));
        }
        let step = (disparity[disparity.len() - 1] - disparity[0]) / (disparity.len() - 1) as f64;
        let scale = disparity[disparity.len() - 1].abs();
        for (i, pair) in disparity.windows(2).enumerate() {
            if pair[1] <= pair[0] {
                return Err(domain!("plane disparities must increase back to front (plane {i})"));
            }
            if ((pair[1] - pair[0]) - step).abs() > 1e-9 * scale {
                return Err(domain!("planes are not equally spaced in disparity (plane {i})"));
            }
        }
        Ok(Self {
            z: depths.to_vec(),
            disparity,
        })
    }
}

/// `d_count` planes equally spaced in `1/z` from `z_far` (may be `+inf`) to `z_near`.
pub fn make_depth_planes(d_count: usize, z_far: f64, z_near: f64) -> Result<DepthPlanes> {
    if d_count < 2 {
        return Err(domain!("need at least two depth planes, got {d_count}"));
    }
    if !(z_near > 0.0) || !z_near.is_finite() {
        return Err(domain!("z_near must be positive and finite, got {z_near}"));
    }
    if !(z_far > z_near) {
        return Err(domain!("z_far ({z_far}) must exceed z_near ({z_near})"));
    }
    let far = 1.0 / z_far;
    let near = 1.0 / z_near;
    let last = (d_count - 1) as f64;
    let disparity: Vec<f64> = (0..d_count)
        .map(|i| match i {
            0 => far,
            i if i == d_count - 1 => near,
            i => far + (near - far) * (i as f64 / last),
        })
        .collect();
    let z = disparity
        .iter()
        .map(|&d| if d == 0.0 { f64::INFINITY } else { 1.0 / d })
        .collect();
    Ok(DepthPlanes { z, disparity })
}

fn rotation_to_quaternion(r: &Matrix3<f64>) -> Vector4<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let c = q.quaternion().coords;
    Vector4::new(c.w, c.x, c.y, c.z)
}

fn quaternion_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
    uq.to_rotation_matrix().into_inner()
}

/// Principal eigenvector of `sum q q^T`; the quaternion mean of the inputs.
pub(crate) fn average_quaternions(quats: &[Vector4<f64>]) -> Vector4<f64> {
    let first = quats[0];
    let mut acc = Matrix4::<f64>::zeros();
    for q in quats {
        let q = if q.dot(&first) < 0.0 { -q } else { *q };
        acc += q * q.transpose();
    }
    let eig = SymmetricEigen::new(acc);
    let best = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut q: Vector4<f64> = eig.eigenvectors.column(best).into_owned();
    q /= q.norm();
    if q.dot(&first) < 0.0 {
        q = -q;
    }
    q
}

/// Virtual reference camera: mean position, quaternion-averaged
/// orientation and elementwise-mean intrinsics.
///
/// Inputs are summed in a canonical order so the result is bit-identical for
/// any permutation of `cameras`.
pub fn average_reference_camera(cameras: &[PinholeCamera]) -> Result<PinholeCamera> {
    let first = cameras
        .first()
        .ok_or_else(|| domain!("cannot average an empty camera list"))?;
    if cameras
        .iter()
        .any(|c| c.width != first.width || c.height != first.height)
    {
        return Err(domain!("cameras must share one image size"));
    }
    let mut sorted: Vec<&PinholeCamera> = cameras.iter().collect();
    sorted.sort_by(|a, b| a.canonical_cmp(b));

    let n = sorted.len() as f64;
    let mut position = Vector3::zeros();
    let mut k = Matrix3::zeros();
    for cam in &sorted {
        position += cam.translation;
        k += cam.intrinsics;
    }
    position /= n;
    k /= n;
    // keep the structural zeros and unit corner exact
    k[(1, 0)] = 0.0;
    k[(2, 0)] = 0.0;
    k[(2, 1)] = 0.0;
    k[(2, 2)] = 1.0;

    let quats: Vec<Vector4<f64>> = sorted
        .iter()
        .map(|c| rotation_to_quaternion(&c.rotation))
        .collect();
    let rotation = if sorted.iter().all(|c| c.rotation == sorted[0].rotation) {
        sorted[0].rotation
    } else {
        quaternion_to_rotation(&average_quaternions(&quats))
    };

    let cam = PinholeCamera {
        intrinsics: k,
        rotation,
        translation: position,
        width: first.width,
        height: first.height,
        name: "reference".to_string(),
    };
    cam.validate()?;
    Ok(cam)
}

/// JSON form of a camera in a rig file; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    #[serde(rename = "K")]
    pub k: [[f64; 3]; 3],
    #[serde(rename = "R")]
    pub r: [[f64; 3]; 3],
    #[serde(rename = "T")]
    pub t: [f64; 3],
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub name: String,
}

impl From<&PinholeCamera> for CameraRecord {
    fn from(cam: &PinholeCamera) -> Self {
        let rows = |m: &Matrix3<f64>| {
            let mut out = [[0.0; 3]; 3];
            for (r, row) in out.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = m[(r, c)];
                }
            }
            out
        };
        CameraRecord {
            k: rows(&cam.intrinsics),
            r: rows(&cam.rotation),
            t: [cam.translation.x, cam.translation.y, cam.translation.z],
            width: cam.width,
            height: cam.height,
            name: cam.name.clone(),
        }
    }
}

impl TryFrom<CameraRecord> for PinholeCamera {
    type Error = Error;

    fn try_from(rec: CameraRecord) -> Result<Self> {
        let m = |a: [[f64; 3]; 3]| Matrix3::from_fn(|r, c| a[r][c]);
        PinholeCamera::new(
            m(rec.k),
            m(rec.r),
            Vector3::from(rec.t),
            rec.width,
            rec.height,
            rec.name,
        )
    }
}
