//! Moving image data between camera frames and plane-sweep / MPI volumes.
//!
//! Both directions are gather warps: every destination pixel is mapped to the
//! source image through the plane homography and sampled bilinearly. Taps
//! falling outside the source contribute zero. Warps into the reference frame
//! are additionally gated by the in-frame test of the mapped pixel center
//! against `[0, W-1] x [0, H-1]`, which is also what the PSV mask records.
//!
//! Every warp is linear in the sampled values, so the backward pass is the
//! transposed scatter of the same bilinear weights.

use nalgebra::Matrix3;
use rayon::prelude::*;

use crate::error::{domain, shape, Result};
use crate::geometry::{map_point, plane_homography, DepthPlanes, PinholeCamera};
use crate::real::Real;
use crate::tensor::{Dims, Image, Volume};

/// N calibrated input views of identical size, values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct ImageStack<R> {
    pub images: Vec<Image<R>>,
    pub cameras: Vec<PinholeCamera>,
}

impl<R: Real> ImageStack<R> {
    pub fn new(images: Vec<Image<R>>, cameras: Vec<PinholeCamera>) -> Result<Self> {
        if images.is_empty() {
            return Err(domain!("image stack needs at least one view"));
        }
        if images.len() != cameras.len() {
            return Err(shape!("{} images but {} cameras", images.len(), cameras.len()));
        }
        for (img, cam) in images.iter().zip(&cameras) {
            if img.width != cam.width || img.height != cam.height {
                return Err(shape!(
                    "image {}x{} does not match camera {:?} ({}x{})",
                    img.width,
                    img.height,
                    cam.name,
                    cam.width,
                    cam.height
                ));
            }
            if img.data.iter().any(|v| !(*v >= R::zero() && *v <= R::one())) {
                return Err(domain!("image for {:?} has values outside [0, 1]", cam.name));
            }
        }
        if images
            .iter()
            .any(|i| i.width != images[0].width || i.height != images[0].height)
        {
            return Err(shape!("all views must share one resolution"));
        }
        Ok(Self { images, cameras })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Reorders views; used to check order independence.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            images: order.iter().map(|&i| self.images[i].clone()).collect(),
            cameras: order.iter().map(|&i| self.cameras[i].clone()).collect(),
        }
    }
}

/// Plane-sweep volumes of every input view in the reference frame.
/// Channels are RGB plus the binary in-frame mask.
#[derive(Debug, Clone)]
pub struct PsvStack<R> {
    pub views: Vec<Volume<R>>,
    pub planes: DepthPlanes,
    pub reference: PinholeCamera,
    pub cameras: Vec<PinholeCamera>,
}

impl<R: Real> PsvStack<R> {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    pub fn dims(&self) -> Dims {
        self.views[0].dims
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            views: order.iter().map(|&i| self.views[i].clone()).collect(),
            cameras: order.iter().map(|&i| self.cameras[i].clone()).collect(),
            planes: self.planes.clone(),
            reference: self.reference.clone(),
        }
    }
}

/// MPI content resampled into each view's frustum.
#[derive(Debug, Clone)]
pub struct ViewVolumeStack<R> {
    pub views: Vec<Volume<R>>,
    pub planes: DepthPlanes,
    pub cameras: Vec<PinholeCamera>,
}

#[derive(Debug, Clone, Copy)]
struct Tap<R> {
    idx: [u32; 4],
    w: [R; 4],
}

/// Precomputed bilinear taps for one destination grid.
#[derive(Debug, Clone)]
pub struct WarpPlan<R> {
    src: (usize, usize),
    dst: (usize, usize),
    taps: Vec<Tap<R>>,
    inside: Vec<bool>,
}

impl<R: Real> WarpPlan<R> {
    /// `dst_to_src` maps destination pixels to source pixels; `None` yields an
    /// all-zero plan.
    pub fn new(
        dst_to_src: Option<&Matrix3<f64>>,
        src: (usize, usize),
        dst: (usize, usize),
    ) -> Self {
        let (sw, sh) = src;
        let n = dst.0 * dst.1;
        let empty = Tap {
            idx: [0; 4],
            w: [R::zero(); 4],
        };
        let mut taps = vec![empty; n];
        let mut inside = vec![false; n];
        let Some(h) = dst_to_src else {
            return Self {
                src,
                dst,
                taps,
                inside,
            };
        };
        let (wmax, hmax) = ((sw - 1) as f64, (sh - 1) as f64);
        for y in 0..dst.1 {
            for x in 0..dst.0 {
                let p = y * dst.0 + x;
                let Some((u, v)) = map_point(h, x as f64, y as f64) else {
                    continue;
                };
                if !(u > -1.0 && u < sw as f64 && v > -1.0 && v < sh as f64) {
                    continue;
                }
                inside[p] = u >= 0.0 && u <= wmax && v >= 0.0 && v <= hmax;
                let (x0, y0) = (u.floor(), v.floor());
                let (fx, fy) = (u - x0, v - y0);
                let (xi, yi) = (x0 as isize, y0 as isize);
                let corners = [
                    (0, 0, (1.0 - fx) * (1.0 - fy)),
                    (1, 0, fx * (1.0 - fy)),
                    (0, 1, (1.0 - fx) * fy),
                    (1, 1, fx * fy),
                ];
                let tap = &mut taps[p];
                for (k, (dx, dy, wgt)) in corners.into_iter().enumerate() {
                    let (cx, cy) = (xi + dx, yi + dy);
                    if cx >= 0 && cy >= 0 && (cx as usize) < sw && (cy as usize) < sh {
                        tap.idx[k] = (cy as usize * sw + cx as usize) as u32;
                        tap.w[k] = R::c(wgt);
                    }
                }
            }
        }
        Self {
            src,
            dst,
            taps,
            inside,
        }
    }

    /// In-frame flags of the destination pixels.
    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn src_size(&self) -> (usize, usize) {
        self.src
    }

    pub fn dst_size(&self) -> (usize, usize) {
        self.dst
    }

    /// Samples `channels` interleaved values per pixel from `src` into `dst`.
    pub fn gather(&self, src: &[R], dst: &mut [R], channels: usize, gated: bool) {
        debug_assert_eq!(src.len(), self.src.0 * self.src.1 * channels);
        debug_assert_eq!(dst.len(), self.taps.len() * channels);
        for (p, (tap, out)) in self.taps.iter().zip(dst.chunks_exact_mut(channels)).enumerate() {
            if gated && !self.inside[p] {
                out.fill(R::zero());
                continue;
            }
            for (c, o) in out.iter_mut().enumerate() {
                let mut acc = R::zero();
                for k in 0..4 {
                    acc += tap.w[k] * src[tap.idx[k] as usize * channels + c];
                }
                *o = acc;
            }
        }
    }

    /// Adjoint of [`WarpPlan::gather`]: accumulates into `grad_src`.
    pub fn scatter_add(&self, grad_dst: &[R], grad_src: &mut [R], channels: usize, gated: bool) {
        debug_assert_eq!(grad_src.len(), self.src.0 * self.src.1 * channels);
        for (p, (tap, g)) in self.taps.iter().zip(grad_dst.chunks_exact(channels)).enumerate() {
            if gated && !self.inside[p] {
                continue;
            }
            for (c, &gv) in g.iter().enumerate() {
                if gv == R::zero() {
                    continue;
                }
                for k in 0..4 {
                    grad_src[tap.idx[k] as usize * channels + c] += tap.w[k] * gv;
                }
            }
        }
    }
}

/// Warp plans for every (view, plane) pair of a rig, both directions.
#[derive(Debug, Clone)]
pub struct RigWarps<R> {
    ref_dims: Dims,
    view_dims: Vec<Dims>,
    to_reference: Vec<WarpPlan<R>>,
    from_reference: Vec<WarpPlan<R>>,
}

impl<R: Real> RigWarps<R> {
    pub fn new(
        reference: &PinholeCamera,
        views: &[PinholeCamera],
        planes: &DepthPlanes,
    ) -> Result<Self> {
        let depth = planes.len();
        let ref_dims = Dims::new(reference.width, reference.height, depth);
        let ref_size = (reference.width, reference.height);
        let mut to_reference = Vec::with_capacity(views.len() * depth);
        let mut from_reference = Vec::with_capacity(views.len() * depth);
        let mut view_dims = Vec::with_capacity(views.len());
        for view in views {
            let view_size = (view.width, view.height);
            view_dims.push(Dims::new(view.width, view.height, depth));
            for &disp in planes.disparities() {
                let h = plane_homography(reference, view, disp)?;
                to_reference.push(WarpPlan::new(Some(&h.matrix), view_size, ref_size));
                let inv = h.matrix.try_inverse();
                from_reference.push(WarpPlan::new(inv.as_ref(), ref_size, view_size));
            }
        }
        Ok(Self {
            ref_dims,
            view_dims,
            to_reference,
            from_reference,
        })
    }

    pub fn n_views(&self) -> usize {
        self.view_dims.len()
    }

    pub fn ref_dims(&self) -> Dims {
        self.ref_dims
    }

    pub fn view_dims(&self, n: usize) -> Dims {
        self.view_dims[n]
    }

    /// Plan sampling view `n` onto the reference grid at plane `d`.
    pub fn to_reference_plan(&self, n: usize, d: usize) -> &WarpPlan<R> {
        &self.to_reference[n * self.ref_dims.depth + d]
    }

    /// Plan sampling the reference grid into view `n` at plane `d`.
    pub fn from_reference_plan(&self, n: usize, d: usize) -> &WarpPlan<R> {
        &self.from_reference[n * self.ref_dims.depth + d]
    }

    /// Gated warp of a view-frame volume into the reference frame.
    pub fn volume_to_reference(&self, n: usize, src: &Volume<R>) -> Volume<R> {
        let c = src.channels;
        let mut out = Volume::zeros(self.ref_dims, c);
        let plane_len = self.ref_dims.plane() * c;
        out.data
            .par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(d, dst)| self.to_reference_plan(n, d).gather(src.plane(d), dst, c, true));
        out
    }

    pub fn volume_to_reference_adjoint(&self, n: usize, grad: &Volume<R>) -> Volume<R> {
        let c = grad.channels;
        let mut out = Volume::zeros(self.view_dims[n], c);
        let plane_len = self.view_dims[n].plane() * c;
        out.data
            .par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(d, dst)| {
                self.to_reference_plan(n, d)
                    .scatter_add(grad.plane(d), dst, c, true)
            });
        out
    }

    /// Zero-padded warp of a reference-frame volume into view `n`.
    pub fn volume_from_reference(&self, n: usize, src: &Volume<R>) -> Volume<R> {
        let c = src.channels;
        let mut out = Volume::zeros(self.view_dims[n], c);
        let plane_len = self.view_dims[n].plane() * c;
        out.data
            .par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(d, dst)| self.from_reference_plan(n, d).gather(src.plane(d), dst, c, false));
        out
    }

    pub fn volume_from_reference_adjoint(&self, n: usize, grad: &Volume<R>) -> Volume<R> {
        let c = grad.channels;
        let mut out = Volume::zeros(self.ref_dims, c);
        let plane_len = self.ref_dims.plane() * c;
        out.data
            .par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(d, dst)| {
                self.from_reference_plan(n, d)
                    .scatter_add(grad.plane(d), dst, c, false)
            });
        out
    }
}

/// Tiles each image along a new depth axis and appends a unit mask channel.
pub fn broadcast_depth<R: Real>(images: &ImageStack<R>, planes: &DepthPlanes) -> Vec<Volume<R>> {
    images
        .images
        .iter()
        .map(|img| {
            let dims = Dims::new(img.width, img.height, planes.len());
            let mut vol = Volume::zeros(dims, 4);
            for d in 0..dims.depth {
                for (dst, src) in vol
                    .plane_mut(d)
                    .chunks_exact_mut(4)
                    .zip(img.data.chunks_exact(3))
                {
                    dst[..3].copy_from_slice(src);
                    dst[3] = R::one();
                }
            }
            vol
        })
        .collect()
}

/// Adjoint of [`broadcast_depth`] restricted to the RGB channels.
pub fn broadcast_depth_backward<R: Real>(grads: &[Volume<R>]) -> Vec<Image<R>> {
    grads
        .iter()
        .map(|g| {
            let mut img = Image::zeros(g.dims.width, g.dims.height);
            for d in 0..g.dims.depth {
                for (dst, src) in img.data.chunks_exact_mut(3).zip(g.plane(d).chunks_exact(4)) {
                    for c in 0..3 {
                        dst[c] += src[c];
                    }
                }
            }
            img
        })
        .collect()
}

fn check_views<R>(vols: &[Volume<R>], views: &[PinholeCamera], planes: &DepthPlanes) -> Result<()> {
    if vols.len() != views.len() {
        return Err(shape!("{} volumes but {} cameras", vols.len(), views.len()));
    }
    for (v, cam) in vols.iter().zip(views) {
        if v.dims != Dims::new(cam.width, cam.height, planes.len()) {
            return Err(shape!(
                "volume {} does not match camera {:?} with {} planes",
                v.dims,
                cam.name,
                planes.len()
            ));
        }
    }
    Ok(())
}

/// Warps broadcast views onto the reference camera through every plane.
pub fn warp_to_reference<R: Real>(
    broadcast: &[Volume<R>],
    reference: &PinholeCamera,
    views: &[PinholeCamera],
    planes: &DepthPlanes,
) -> Result<PsvStack<R>> {
    check_views(broadcast, views, planes)?;
    let warps = RigWarps::new(reference, views, planes)?;
    Ok(PsvStack {
        views: warp_to_reference_with(broadcast, &warps),
        planes: planes.clone(),
        reference: reference.clone(),
        cameras: views.to_vec(),
    })
}

/// [`warp_to_reference`] with precomputed plans. The mask channel of the
/// input is all ones by construction, so the output mask is the in-frame test.
pub fn warp_to_reference_with<R: Real>(broadcast: &[Volume<R>], warps: &RigWarps<R>) -> Vec<Volume<R>> {
    broadcast
        .iter()
        .enumerate()
        .map(|(n, src)| {
            let mut out = warps.volume_to_reference(n, src);
            let plane_len = warps.ref_dims.plane();
            for d in 0..warps.ref_dims.depth {
                let inside = warps.to_reference_plan(n, d).inside();
                let dst = &mut out.data[d * plane_len * 4..(d + 1) * plane_len * 4];
                for (px, &ins) in dst.chunks_exact_mut(4).zip(inside) {
                    px[3] = if ins { R::one() } else { R::zero() };
                }
            }
            out
        })
        .collect()
}

/// Gradient of [`warp_to_reference_with`] with respect to the broadcast
/// RGB values; the mask channel receives no gradient.
pub fn warp_to_reference_backward<R: Real>(grad_psv: &[Volume<R>], warps: &RigWarps<R>) -> Vec<Volume<R>> {
    grad_psv
        .iter()
        .enumerate()
        .map(|(n, g)| {
            let mut g = g.clone();
            for px in g.data.chunks_exact_mut(4) {
                px[3] = R::zero();
            }
            warps.volume_to_reference_adjoint(n, &g)
        })
        .collect()
}

/// `warp_to_reference(broadcast_depth(images))`.
pub fn build_psv<R: Real>(
    images: &ImageStack<R>,
    reference: &PinholeCamera,
    planes: &DepthPlanes,
) -> Result<PsvStack<R>> {
    warp_to_reference(&broadcast_depth(images, planes), reference, &images.cameras, planes)
}

/// Same as [`build_psv`] but reuses precomputed plans.
pub fn build_psv_with<R: Real>(
    images: &ImageStack<R>,
    reference: &PinholeCamera,
    planes: &DepthPlanes,
    warps: &RigWarps<R>,
) -> PsvStack<R> {
    PsvStack {
        views: warp_to_reference_with(&broadcast_depth(images, planes), warps),
        planes: planes.clone(),
        reference: reference.clone(),
        cameras: images.cameras.clone(),
    }
}

/// Repeats reference-frame MPI content once per view.
pub fn broadcast_views<R: Real>(content: &Volume<R>, n_views: usize) -> Vec<Volume<R>> {
    vec![content.clone(); n_views]
}

pub fn broadcast_views_backward<R: Real>(grads: &[Volume<R>]) -> Volume<R> {
    let mut out = grads[0].clone();
    for g in &grads[1..] {
        for (o, v) in out.data.iter_mut().zip(&g.data) {
            *o += *v;
        }
    }
    out
}

/// Maps each reference-frame slice into the corresponding view's frustum.
pub fn warp_from_reference<R: Real>(
    broadcast_mpi: &[Volume<R>],
    reference: &PinholeCamera,
    views: &[PinholeCamera],
    planes: &DepthPlanes,
) -> Result<ViewVolumeStack<R>> {
    for v in broadcast_mpi {
        if v.dims != Dims::new(reference.width, reference.height, planes.len()) {
            return Err(shape!("MPI volume {} does not match the reference camera", v.dims));
        }
    }
    if broadcast_mpi.len() != views.len() {
        return Err(shape!("{} volumes but {} cameras", broadcast_mpi.len(), views.len()));
    }
    let warps = RigWarps::new(reference, views, planes)?;
    Ok(ViewVolumeStack {
        views: warp_from_reference_with(broadcast_mpi, &warps),
        planes: planes.clone(),
        cameras: views.to_vec(),
    })
}

pub fn warp_from_reference_with<R: Real>(broadcast_mpi: &[Volume<R>], warps: &RigWarps<R>) -> Vec<Volume<R>> {
    broadcast_mpi
        .iter()
        .enumerate()
        .map(|(n, src)| warps.volume_from_reference(n, src))
        .collect()
}

pub fn warp_from_reference_backward<R: Real>(grads: &[Volume<R>], warps: &RigWarps<R>) -> Vec<Volume<R>> {
    grads
        .iter()
        .enumerate()
        .map(|(n, g)| warps.volume_from_reference_adjoint(n, g))
        .collect()
}
