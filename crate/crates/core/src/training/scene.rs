//! Procedural light-field scenes: textured fronto-parallel layers seen by a
//! 3x3 camera rig, with an exact analytic renderer.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::geometry::{make_depth_planes, DepthPlanes, PinholeCamera};
use crate::real::Real;
use crate::render::{AlphaVolume, Mpi};
use crate::tensor::{Dims, Image, Volume};

/// Camera spacing of the toy rig in meters; keeps the inter-plane
/// displacement under one pixel for up to five views at 32 px and 8 planes.
pub const TOY_BASELINE: f64 = 0.18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneFamily {
    /// Background plus one foreground rectangle.
    TwoPlane,
    /// Background plus `layers - 1` rectangles at random depths.
    Layered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub layers: usize,
    pub z_near: f64,
    pub baseline: f64,
    /// Shortest texture wavelength in pixels of the central view.
    pub min_wavelength: f64,
    /// Width of the linear alpha ramp at rectangle borders, in pixels.
    pub edge_width: f64,
    pub family: SceneFamily,
    /// Place every layer exactly on one of this many planes.
    #[serde(default)]
    pub snap_planes: Option<usize>,
}

impl SceneSpec {
    pub fn two_plane(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            layers: 2,
            z_near: 1.5,
            baseline: TOY_BASELINE,
            min_wavelength: 8.0,
            edge_width: 2.0,
            family: SceneFamily::TwoPlane,
            snap_planes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 4 || self.height < 4 {
            return Err(domain!("scene images must be at least 4x4"));
        }
        if self.layers == 0 || (self.family == SceneFamily::TwoPlane && self.layers != 2) {
            return Err(domain!("{:?} scenes cannot have {} layers", self.family, self.layers));
        }
        if !(self.z_near > 0.0 && self.z_near.is_finite()) || !(self.baseline >= 0.0) {
            return Err(domain!("z_near must be positive and the baseline non-negative"));
        }
        if !(self.min_wavelength >= 2.0) || !(self.edge_width > 0.0) {
            return Err(domain!("wavelength must be at least 2 px and the edge width positive"));
        }
        if let Some(d) = self.snap_planes {
            if d < 2 {
                return Err(domain!("snapping needs at least 2 planes"));
            }
        }
        Ok(())
    }

    pub fn max_disparity(&self) -> f64 {
        1.0 / self.z_near
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    /// Cycles per pixel along x and y.
    pub freq: [f64; 2],
    pub phase: f64,
    pub amp: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base: [f64; 3],
    pub waves: Vec<Wave>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, min_wavelength: f64) -> Self {
        let base = [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)];
        // amplitudes sum to at most 0.2 per channel, so values stay in [0, 1]
        let waves = (0..4)
            .map(|_| {
                let wavelength = rng.random_range(min_wavelength..4.0 * min_wavelength);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                Wave {
                    freq: [angle.cos() / wavelength, angle.sin() / wavelength],
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: [rng.random_range(0.0..0.05), rng.random_range(0.0..0.05), rng.random_range(0.0..0.05)],
                }
            })
            .collect();
        Self { base, waves }
    }

    pub fn color(&self, q: [f64; 2]) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            let s = (std::f64::consts::TAU * (w.freq[0] * q[0] + w.freq[1] * q[1]) + w.phase).sin();
            for k in 0..3 {
                c[k] += w.amp[k] * s;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// A textured fronto-parallel layer. Texture and extent are expressed in
/// pixel coordinates of the central rig camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Inverse depth in 1/m; 0 is at infinity.
    pub disparity: f64,
    pub texture: Texture,
    /// `[x0, y0, x1, y1]`; `None` covers the whole plane.
    pub rect: Option<[f64; 4]>,
    pub edge_width: f64,
}

impl Layer {
    pub fn depth(&self) -> f64 {
        if self.disparity == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.disparity
        }
    }

    pub fn alpha(&self, q: [f64; 2]) -> f64 {
        match self.rect {
            None => 1.0,
            Some([x0, y0, x1, y1]) => {
                let ramp = |t: f64| (t / self.edge_width + 0.5).clamp(0.0, 1.0);
                ramp(q[0] - x0) * ramp(x1 - q[0]) * ramp(q[1] - y0) * ramp(y1 - q[1])
            }
        }
    }

    /// Distance from `q` to the rectangle border; infinite for full planes.
    pub fn edge_distance(&self, q: [f64; 2]) -> f64 {
        match self.rect {
            None => f64::INFINITY,
            Some([x0, y0, x1, y1]) => {
                let inside_x = q[0] >= x0 && q[0] <= x1;
                let inside_y = q[1] >= y0 && q[1] <= y1;
                let dx = (q[0] - x0).abs().min((q[0] - x1).abs());
                let dy = (q[1] - y0).abs().min((q[1] - y1).abs());
                match (inside_x, inside_y) {
                    (true, true) => dx.min(dy),
                    (true, false) => dy,
                    (false, true) => dx,
                    (false, false) => dx.hypot(dy),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub seed: u64,
    pub spec: SceneSpec,
    /// Sorted far to near.
    pub layers: Vec<Layer>,
    /// Row-major 3x3 rig, named `cRC`.
    pub rig: Vec<PinholeCamera>,
}

/// The 3x3 rig: focal length equal to the width, centered principal point,
/// identity rotations, cameras on a `baseline` grid in the z = 0 plane.
pub fn toy_rig(width: usize, height: usize, baseline: f64) -> Vec<PinholeCamera> {
    let mut rig = Vec::with_capacity(9);
    for row in 0..3 {
        for col in 0..3 {
            let t = Vector3::new((col as f64 - 1.0) * baseline, (row as f64 - 1.0) * baseline, 0.0);
            rig.push(PinholeCamera::centered(width as f64, width, height, format!("c{row}{col}")).with_translation(t));
        }
    }
    rig
}

/// Deterministic scene for `seed`.
pub fn generate_scene(seed: u64, spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_max = spec.max_disparity();
    let snap = match spec.snap_planes {
        Some(d) => Some(make_depth_planes(d, f64::INFINITY, spec.z_near)?),
        None => None,
    };
    // disparity drawn from a fraction range of d_max, optionally snapped to a plane
    let pick = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| -> f64 {
        match &snap {
            None => rng.random_range(lo..=hi) * d_max,
            Some(planes) => {
                let last = (planes.len() - 1) as f64;
                let (a, b) = ((lo * last).ceil() as usize, (hi * last).floor() as usize);
                planes.disparities()[rng.random_range(a..=b.max(a))]
            }
        }
    };
    let (w, h) = (spec.width as f64, spec.height as f64);
    let mut layers = vec![Layer {
        disparity: pick(&mut rng, 0.0, 0.3),
        texture: Texture::random(&mut rng, spec.min_wavelength),
        rect: None,
        edge_width: spec.edge_width,
    }];
    for _ in 1..spec.layers {
        let (lo, hi) = match spec.family {
            SceneFamily::TwoPlane => (0.5, 1.0),
            SceneFamily::Layered => (0.3, 1.0),
        };
        let disparity = pick(&mut rng, lo, hi);
        let (rw, rh) = (rng.random_range(0.3..0.6) * w, rng.random_range(0.3..0.6) * h);
        let (cx, cy) = (rng.random_range(0.3..0.7) * w, rng.random_range(0.3..0.7) * h);
        let mut texture = Texture::random(&mut rng, spec.min_wavelength);
        // keep the foreground distinguishable from what lies behind it
        let behind = layers.last().expect("background layer").texture.base;
        for k in 0..3 {
            if (texture.base[k] - behind[k]).abs() < 0.15 {
                texture.base[k] = if behind[k] > 0.5 { behind[k] - 0.3 } else { behind[k] + 0.3 };
            }
        }
        layers.push(Layer {
            disparity,
            texture,
            rect: Some([cx - rw / 2.0, cy - rh / 2.0, cx + rw / 2.0, cy + rh / 2.0]),
            edge_width: spec.edge_width,
        });
    }
    layers.sort_by(|a, b| a.disparity.total_cmp(&b.disparity));
    Ok(SyntheticScene {
        seed,
        spec: spec.clone(),
        layers,
        rig: toy_rig(spec.width, spec.height, spec.baseline),
    })
}

impl SyntheticScene {
    pub fn camera(&self, name: &str) -> Option<&PinholeCamera> {
        self.rig.iter().find(|c| c.name == name)
    }

    /// Intrinsics the textures are expressed in.
    fn texture_camera(&self) -> &PinholeCamera {
        &self.rig[4]
    }

    /// Texture coordinate where the ray through pixel `(u, v)` of `cam`
    /// meets the plane of disparity `disparity`; `None` if it never does.
    fn texture_coord(&self, cam: &PinholeCamera, u: f64, v: f64, disparity: f64) -> Option<[f64; 2]> {
        let k_inv = cam.intrinsics.try_inverse()?;
        let dir = cam.rotation * (k_inv * Vector3::new(u, v, 1.0));
        let c = cam.translation;
        let scale = 1.0 - c.z * disparity;
        if dir.z <= 0.0 || scale <= 0.0 {
            return None;
        }
        // X / Z of the intersection; valid at zero disparity as well
        let p = c * disparity + dir * (scale / dir.z);
        let q = self.texture_camera().intrinsics * p;
        Some([q.x / q.z, q.y / q.z])
    }

    /// Exact back-to-front composite of all layers at each pixel center.
    pub fn render(&self, cam: &PinholeCamera) -> Image<f64> {
        Image::from_fn(cam.width, cam.height, |x, y| {
            let mut out = [0.0; 3];
            for layer in &self.layers {
                if let Some(q) = self.texture_coord(cam, x as f64, y as f64, layer.disparity) {
                    let a = layer.alpha(q);
                    if a > 0.0 {
                        let c = layer.texture.color(q);
                        for k in 0..3 {
                            out[k] = a * c[k] + (1.0 - a) * out[k];
                        }
                    }
                }
            }
            out
        })
    }

    /// Pixels of `cam` within `margin` texture pixels of a rectangle border.
    pub fn edge_mask(&self, cam: &PinholeCamera, margin: f64) -> Vec<bool> {
        let mut mask = vec![false; cam.width * cam.height];
        for y in 0..cam.height {
            for x in 0..cam.width {
                mask[y * cam.width + x] = self.layers.iter().any(|l| {
                    self.texture_coord(cam, x as f64, y as f64, l.disparity)
                        .is_some_and(|q| l.edge_distance(q) < margin)
                });
            }
        }
        mask
    }

    /// Premultiplied color and alpha of every layer lying on plane `d`.
    fn plane_content(&self, planes: &DepthPlanes, reference: &PinholeCamera) -> Result<Vec<Vec<usize>>> {
        let mut per_plane = vec![Vec::new(); planes.len()];
        let d_max = planes.disparities().last().copied().unwrap_or(1.0);
        for (i, layer) in self.layers.iter().enumerate() {
            let hit = planes
                .disparities()
                .iter()
                .position(|&d| (d - layer.disparity).abs() <= 1e-9 * d_max.max(1.0));
            match hit {
                Some(d) => per_plane[d].push(i),
                None => {
                    return Err(domain!(
                        "layer at disparity {} lies on no plane; generate the scene with snapping",
                        layer.disparity
                    ))
                }
            }
        }
        if reference.width == 0 || reference.height == 0 {
            return Err(domain!("empty reference camera"));
        }
        Ok(per_plane)
    }

    /// RGBA layers exactly on the planes; requires snapped layer depths.
    pub fn ground_truth_mpi(&self, reference: &PinholeCamera, planes: &DepthPlanes) -> Result<Mpi<f64>> {
        let per_plane = self.plane_content(planes, reference)?;
        let dims = Dims::new(reference.width, reference.height, planes.len());
        let mut data = Volume::zeros(dims, 4);
        for (d, layers) in per_plane.iter().enumerate() {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let mut rgb = [0.0; 3];
                    let mut alpha = 0.0;
                    for &i in layers {
                        let layer = &self.layers[i];
                        let Some(q) = self.texture_coord(reference, x as f64, y as f64, layer.disparity) else {
                            continue;
                        };
                        let a = layer.alpha(q);
                        let c = layer.texture.color(q);
                        for k in 0..3 {
                            rgb[k] = a * c[k] + (1.0 - a) * rgb[k];
                        }
                        alpha = a + (1.0 - a) * alpha;
                    }
                    for k in 0..3 {
                        *data.at_mut(x, y, d, k) = if alpha > 0.0 { rgb[k] / alpha } else { 0.0 };
                    }
                    *data.at_mut(x, y, d, 3) = alpha;
                }
            }
        }
        Ok(Mpi {
            data,
            planes: planes.clone(),
            reference: reference.clone(),
        })
    }

    /// Alpha logits of [`ground_truth_mpi`](Self::ground_truth_mpi), clamped
    /// to `[1e-9, 1 - 1e-9]` before the logit.
    pub fn ground_truth_alpha<R: Real>(
        &self,
        reference: &PinholeCamera,
        planes: &DepthPlanes,
    ) -> Result<AlphaVolume<R>> {
        let mpi = self.ground_truth_mpi(reference, planes)?;
        let logits = mpi
            .data
            .data
            .chunks_exact(4)
            .map(|px| {
                let a = px[3].clamp(1e-9, 1.0 - 1e-9);
                R::c((a / (1.0 - a)).ln())
            })
            .collect();
        Ok(AlphaVolume {
            logits: Volume::from_vec(mpi.data.dims, 1, logits)?,
            planes: planes.clone(),
            reference: reference.clone(),
        })
    }
}
