//! Compositing, visibility, the visual clues and MPI colorization.
//!
//! Every forward function here has a matching `*_backward` that returns the
//! exact gradient; those are what the training pipeline chains together.

use crate::error::{shape, Result};
use crate::geometry::{DepthPlanes, PinholeCamera};
use crate::real::{sigmoid, Real};
use crate::tensor::{Dims, Image, Volume};
use crate::warp::{PsvStack, RigWarps, ViewVolumeStack};

/// Averaging weights below this are treated as "no camera sees the voxel".
pub const WEIGHT_EPS: f64 = 1e-8;

/// Summation order for the reductions over views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Plain left-to-right summation in view order.
    Ordered,
    /// Terms are sorted before summation, so results are bit-identical under
    /// any permutation of the views.
    #[default]
    Sorted,
}

impl Reduction {
    fn sum<R: Real>(self, terms: &mut [R]) -> R {
        if self == Reduction::Sorted {
            terms.sort_unstable_by(|a, b| a.f64().total_cmp(&b.f64()));
        }
        let mut acc = R::zero();
        for &t in terms.iter() {
            acc += t;
        }
        acc
    }
}

/// Pre-sigmoid alpha logits in the reference frame.
#[derive(Debug, Clone)]
pub struct AlphaVolume<R> {
    pub logits: Volume<R>,
    pub planes: DepthPlanes,
    pub reference: PinholeCamera,
}

impl<R: Real> AlphaVolume<R> {
    pub fn dims(&self) -> Dims {
        self.logits.dims
    }

    /// Opacities `sigmoid(logits)`.
    pub fn alphas(&self) -> Volume<R> {
        Volume {
            dims: self.logits.dims,
            channels: 1,
            data: self.logits.data.iter().map(|&l| sigmoid(l)).collect(),
        }
    }
}

/// RGBA layers in the reference frame, plane 0 farthest.
#[derive(Debug, Clone)]
pub struct Mpi<R> {
    pub data: Volume<R>,
    pub planes: DepthPlanes,
    pub reference: PinholeCamera,
}

impl<R: Real> Mpi<R> {
    pub fn dims(&self) -> Dims {
        self.data.dims
    }

    pub fn alpha(&self) -> Volume<R> {
        self.data.channels_slice(3, 1)
    }
}

/// Per-view visibility of reference-frame voxels.
#[derive(Debug, Clone)]
pub struct VisibilityStack<R> {
    /// `V*`: visibility of each reference voxel as seen from view `n`.
    pub per_view: Vec<Volume<R>>,
    /// Visibility inside each view's own frustum.
    pub per_view_frustum: Vec<Volume<R>>,
    /// Alphas warped into each view; kept for the backward pass.
    pub view_alphas: Vec<Volume<R>>,
    /// Sum of `per_view` over views.
    pub total: Volume<R>,
}

/// The three view-reduced clues fed to the refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualClues<R> {
    /// Total visibility divided by the number of views.
    pub total_visibility: Volume<R>,
    pub mean_color: Volume<R>,
    pub color_variance: Volume<R>,
}

/// Premultiplied color and accumulated alpha of a composited view.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite<R> {
    pub rgb: Image<R>,
    pub alpha: Vec<R>,
}

impl<R: Real> Composite<R> {
    /// Composites the premultiplied result over a constant background.
    pub fn over_background(&self, background: [R; 3]) -> Image<R> {
        let mut out = self.rgb.clone();
        for (px, &a) in out.data.chunks_exact_mut(3).zip(&self.alpha) {
            for c in 0..3 {
                px[c] += (R::one() - a) * background[c];
            }
        }
        out
    }
}

/// Back-to-front over-compositing of one RGBA volume.
pub fn composite_volume<R: Real>(vol: &Volume<R>) -> Composite<R> {
    assert_eq!(vol.channels, 4, "compositing needs RGBA volumes");
    let dims = vol.dims;
    let plane = dims.plane();
    let mut rgb = Image::zeros(dims.width, dims.height);
    let mut alpha = vec![R::zero(); plane];
    for p in 0..plane {
        let mut acc = [R::zero(); 4];
        for d in 0..dims.depth {
            let v = &vol.data[(d * plane + p) * 4..(d * plane + p) * 4 + 4];
            let a = v[3];
            let keep = R::one() - a;
            for c in 0..3 {
                acc[c] = a * v[c] + keep * acc[c];
            }
            acc[3] = a + keep * acc[3];
        }
        rgb.data[p * 3..p * 3 + 3].copy_from_slice(&acc[..3]);
        alpha[p] = acc[3];
    }
    Composite { rgb, alpha }
}

/// Gradient of [`composite_volume`] with respect to the RGBA volume.
pub fn composite_volume_backward<R: Real>(
    vol: &Volume<R>,
    grad_rgb: &Image<R>,
    grad_alpha: &[R],
) -> Volume<R> {
    let dims = vol.dims;
    let plane = dims.plane();
    let mut grad = Volume::zeros(dims, 4);
    let mut prefix = vec![[R::zero(); 4]; dims.depth + 1];
    for p in 0..plane {
        // prefix[d + 1] holds the accumulation after plane d
        for d in 0..dims.depth {
            let v = &vol.data[(d * plane + p) * 4..(d * plane + p) * 4 + 4];
            let a = v[3];
            let mut next = [R::zero(); 4];
            for c in 0..3 {
                next[c] = a * v[c] + (R::one() - a) * prefix[d][c];
            }
            next[3] = a + (R::one() - a) * prefix[d][3];
            prefix[d + 1] = next;
        }
        let mut g = [
            grad_rgb.data[p * 3],
            grad_rgb.data[p * 3 + 1],
            grad_rgb.data[p * 3 + 2],
            grad_alpha[p],
        ];
        for d in (0..dims.depth).rev() {
            let base = (d * plane + p) * 4;
            let v = &vol.data[base..base + 4];
            let a = v[3];
            let below = prefix[d];
            let mut ga = g[3] * (R::one() - below[3]);
            for c in 0..3 {
                ga += g[c] * (v[c] - below[c]);
                grad.data[base + c] = g[c] * a;
            }
            grad.data[base + 3] = ga;
            for gc in g.iter_mut() {
                *gc *= R::one() - a;
            }
        }
    }
    grad
}

/// Composites every view volume of the stack.
pub fn composite_over<R: Real>(view_volumes: &ViewVolumeStack<R>) -> Vec<Composite<R>> {
    view_volumes.views.iter().map(composite_volume).collect()
}

/// `V_d = prod_{i > d} (1 - alpha_i)` along the depth axis of a 1-channel volume.
pub fn visibility_along_depth<R: Real>(alphas: &Volume<R>) -> Volume<R> {
    let dims = alphas.dims;
    let plane = dims.plane();
    let mut vis = Volume::zeros(dims, 1);
    if dims.depth == 0 {
        return vis;
    }
    let top = dims.depth - 1;
    vis.data[top * plane..].fill(R::one());
    for d in (0..top).rev() {
        for p in 0..plane {
            vis.data[d * plane + p] =
                vis.data[(d + 1) * plane + p] * (R::one() - alphas.data[(d + 1) * plane + p]);
        }
    }
    vis
}

pub fn visibility_along_depth_backward<R: Real>(
    alphas: &Volume<R>,
    vis: &Volume<R>,
    grad_vis: &Volume<R>,
) -> Volume<R> {
    let dims = alphas.dims;
    let plane = dims.plane();
    let mut grad_alpha = Volume::zeros(dims, 1);
    let mut carry = vec![R::zero(); plane];
    for d in 0..dims.depth.saturating_sub(1) {
        for p in 0..plane {
            let gv = carry[p] + grad_vis.data[d * plane + p];
            let up = (d + 1) * plane + p;
            grad_alpha.data[up] -= gv * vis.data[up];
            carry[p] = gv * (R::one() - alphas.data[up]);
        }
    }
    grad_alpha
}

/// `V*`: alpha warped into each view, visibility there, warped back.
pub fn mpi_referenced_visibility<R: Real>(
    alpha: &AlphaVolume<R>,
    views: &[PinholeCamera],
) -> Result<VisibilityStack<R>> {
    let warps = RigWarps::new(&alpha.reference, views, &alpha.planes)?;
    Ok(referenced_visibility_with(&alpha.alphas(), &warps, Reduction::Sorted))
}

pub fn referenced_visibility_with<R: Real>(
    alphas: &Volume<R>,
    warps: &RigWarps<R>,
    reduction: Reduction,
) -> VisibilityStack<R> {
    let n_views = warps.n_views();
    let mut per_view = Vec::with_capacity(n_views);
    let mut per_view_frustum = Vec::with_capacity(n_views);
    let mut view_alphas = Vec::with_capacity(n_views);
    for n in 0..n_views {
        let a = warps.volume_from_reference(n, alphas);
        let v = visibility_along_depth(&a);
        let mut back = warps.volume_to_reference(n, &v);
        // bilinear weights can sum to 1 + ulp; the backward pass treats this as identity
        for x in &mut back.data {
            *x = x.min(R::one());
        }
        per_view.push(back);
        per_view_frustum.push(v);
        view_alphas.push(a);
    }
    let dims = alphas.dims;
    let mut total = Volume::zeros(dims, 1);
    let mut terms = vec![R::zero(); n_views];
    for (i, t) in total.data.iter_mut().enumerate() {
        for (term, v) in terms.iter_mut().zip(&per_view) {
            *term = v.data[i];
        }
        *t = reduction.sum(&mut terms);
    }
    VisibilityStack {
        per_view,
        per_view_frustum,
        view_alphas,
        total,
    }
}

/// Gradient of the `V*` volumes with respect to the reference alphas.
pub fn referenced_visibility_backward<R: Real>(
    vis: &VisibilityStack<R>,
    grad_per_view: &[Volume<R>],
    warps: &RigWarps<R>,
) -> Volume<R> {
    let mut grad = Volume::zeros(warps.ref_dims(), 1);
    for (n, g) in grad_per_view.iter().enumerate() {
        let g_frustum = warps.volume_to_reference_adjoint(n, g);
        let g_alpha = visibility_along_depth_backward(&vis.view_alphas[n], &vis.per_view_frustum[n], &g_frustum);
        let g_ref = warps.volume_from_reference_adjoint(n, &g_alpha);
        for (o, v) in grad.data.iter_mut().zip(&g_ref.data) {
            *o += *v;
        }
    }
    grad
}

fn check_psv_vis<R: Real>(psv: &PsvStack<R>, vis: &VisibilityStack<R>) -> Result<()> {
    if psv.n_views() != vis.per_view.len() {
        return Err(shape!(
            "{} PSV views but {} visibility volumes",
            psv.n_views(),
            vis.per_view.len()
        ));
    }
    if vis.per_view.iter().any(|v| v.dims != psv.dims()) {
        return Err(shape!("visibility and PSV volumes differ in size"));
    }
    Ok(())
}

/// Averaging weight `V*_n * mask_n` of view `n` at voxel `i`.
#[inline]
fn weight<R: Real>(psv: &PsvStack<R>, vis: &VisibilityStack<R>, n: usize, i: usize) -> R {
    vis.per_view[n].data[i] * psv.views[n].data[i * 4 + 3]
}

/// Visibility-weighted mean of the PSV colors; zero where no view sees the voxel.
pub fn mean_visible_color<R: Real>(psv: &PsvStack<R>, vis: &VisibilityStack<R>) -> Result<Volume<R>> {
    check_psv_vis(psv, vis)?;
    Ok(moments(psv, vis, Reduction::Sorted).1)
}

/// Visibility-weighted variance of the PSV colors around `mu`.
pub fn visible_color_variance<R: Real>(
    psv: &PsvStack<R>,
    vis: &VisibilityStack<R>,
    mu: &Volume<R>,
) -> Result<Volume<R>> {
    check_psv_vis(psv, vis)?;
    if mu.dims != psv.dims() || mu.channels != 3 {
        return Err(shape!("mean color volume does not match the PSV"));
    }
    let (total, _, _) = moments(psv, vis, Reduction::Sorted);
    Ok(variance(psv, vis, &total, mu, Reduction::Sorted))
}

/// Total weight and mean color per voxel.
fn moments<R: Real>(
    psv: &PsvStack<R>,
    vis: &VisibilityStack<R>,
    reduction: Reduction,
) -> (Volume<R>, Volume<R>, ()) {
    let dims = psv.dims();
    let n_views = psv.n_views();
    let eps = R::c(WEIGHT_EPS);
    let mut total = Volume::zeros(dims, 1);
    let mut mu = Volume::zeros(dims, 3);
    let mut terms = vec![R::zero(); n_views];
    for i in 0..dims.voxels() {
        for (n, t) in terms.iter_mut().enumerate() {
            *t = weight(psv, vis, n, i);
        }
        let w_sum = reduction.sum(&mut terms);
        total.data[i] = w_sum;
        if w_sum < eps {
            continue;
        }
        for c in 0..3 {
            for (n, t) in terms.iter_mut().enumerate() {
                *t = weight(psv, vis, n, i) * psv.views[n].data[i * 4 + c];
            }
            mu.data[i * 3 + c] = reduction.sum(&mut terms) / w_sum;
        }
    }
    (total, mu, ())
}

fn variance<R: Real>(
    psv: &PsvStack<R>,
    vis: &VisibilityStack<R>,
    total: &Volume<R>,
    mu: &Volume<R>,
    reduction: Reduction,
) -> Volume<R> {
    let dims = psv.dims();
    let eps = R::c(WEIGHT_EPS);
    let mut var = Volume::zeros(dims, 3);
    let mut terms = vec![R::zero(); psv.n_views()];
    for i in 0..dims.voxels() {
        let w_sum = total.data[i];
        if w_sum < eps {
            continue;
        }
        for c in 0..3 {
            let m = mu.data[i * 3 + c];
            for (n, t) in terms.iter_mut().enumerate() {
                let diff = m - psv.views[n].data[i * 4 + c];
                *t = weight(psv, vis, n, i) * diff * diff;
            }
            var.data[i * 3 + c] = reduction.sum(&mut terms) / w_sum;
        }
    }
    var
}

/// Clues from a visibility stack already computed for `psv`.
pub fn clues_from_visibility<R: Real>(
    psv: &PsvStack<R>,
    vis: &VisibilityStack<R>,
    reduction: Reduction,
) -> VisualClues<R> {
    let (mut total, mu, _) = moments(psv, vis, reduction);
    let var = variance(psv, vis, &total, &mu, reduction);
    let inv_n = R::one() / R::c(psv.n_views() as f64);
    for t in total.data.iter_mut() {
        *t *= inv_n;
    }
    VisualClues {
        total_visibility: total,
        mean_color: mu,
        color_variance: var,
    }
}

/// Total visibility (normalized by view count), mean visible color and
/// visible color variance of the current geometry.
pub fn compute_clues<R: Real>(alpha: &AlphaVolume<R>, psv: &PsvStack<R>) -> Result<VisualClues<R>> {
    if alpha.dims() != psv.dims() {
        return Err(shape!("alpha volume {} does not match PSV {}", alpha.dims(), psv.dims()));
    }
    let warps = RigWarps::new(&psv.reference, &psv.cameras, &psv.planes)?;
    let vis = referenced_visibility_with(&alpha.alphas(), &warps, Reduction::Sorted);
    Ok(clues_from_visibility(psv, &vis, Reduction::Sorted))
}

/// Gradient of [`clues_from_visibility`] with respect to the `V*` volumes.
pub fn clues_backward<R: Real>(
    psv: &PsvStack<R>,
    vis: &VisibilityStack<R>,
    clues: &VisualClues<R>,
    grad: &VisualClues<R>,
) -> Vec<Volume<R>> {
    let dims = psv.dims();
    let n_views = psv.n_views();
    let eps = R::c(WEIGHT_EPS);
    let inv_n = R::one() / R::c(n_views as f64);
    let mut out: Vec<Volume<R>> = (0..n_views).map(|_| Volume::zeros(dims, 1)).collect();
    for i in 0..dims.voxels() {
        let g_total = grad.total_visibility.data[i] * inv_n;
        let t = clues.total_visibility.data[i] / inv_n;
        if t < eps {
            for n in 0..n_views {
                out[n].data[i] = g_total * psv.views[n].data[i * 4 + 3];
            }
            continue;
        }
        let inv_t = R::one() / t;
        let mut g_mu = [R::zero(); 3];
        let mut g_var = [R::zero(); 3];
        let mut mu = [R::zero(); 3];
        let mut var = [R::zero(); 3];
        for c in 0..3 {
            mu[c] = clues.mean_color.data[i * 3 + c];
            var[c] = clues.color_variance.data[i * 3 + c];
            g_var[c] = grad.color_variance.data[i * 3 + c];
            // d var / d mu, zero up to rounding at the weighted mean
            let mut q = R::zero();
            for n in 0..n_views {
                q += weight(psv, vis, n, i) * (mu[c] - psv.views[n].data[i * 4 + c]);
            }
            g_mu[c] = grad.mean_color.data[i * 3 + c] + g_var[c] * R::c(2.0) * q * inv_t;
        }
        for n in 0..n_views {
            let mut gw = g_total;
            for c in 0..3 {
                let p = psv.views[n].data[i * 4 + c];
                let diff = mu[c] - p;
                gw += g_mu[c] * (p - mu[c]) * inv_t + g_var[c] * (diff * diff - var[c]) * inv_t;
            }
            out[n].data[i] = gw * psv.views[n].data[i * 4 + 3];
        }
    }
    out
}

/// RGB from the mean visible color, alpha from the geometry.
pub fn colorize_mpi<R: Real>(alpha: &AlphaVolume<R>, psv: &PsvStack<R>) -> Result<Mpi<R>> {
    let clues = compute_clues(alpha, psv)?;
    Ok(assemble_mpi(&alpha.alphas(), &clues.mean_color, &alpha.planes, &alpha.reference))
}

/// Packs clamped colors and alphas into an MPI.
pub fn assemble_mpi<R: Real>(
    alphas: &Volume<R>,
    mean_color: &Volume<R>,
    planes: &DepthPlanes,
    reference: &PinholeCamera,
) -> Mpi<R> {
    let mut data = Volume::zeros(alphas.dims, 4);
    for ((px, rgb), &a) in data
        .data
        .chunks_exact_mut(4)
        .zip(mean_color.data.chunks_exact(3))
        .zip(&alphas.data)
    {
        for c in 0..3 {
            px[c] = rgb[c].max(R::zero()).min(R::one());
        }
        px[3] = a;
    }
    Mpi {
        data,
        planes: planes.clone(),
        reference: reference.clone(),
    }
}

/// Splits an MPI gradient into color (through the clamp) and alpha parts.
pub fn assemble_mpi_backward<R: Real>(mean_color: &Volume<R>, grad_mpi: &Volume<R>) -> (Volume<R>, Volume<R>) {
    let dims = grad_mpi.dims;
    let mut g_color = Volume::zeros(dims, 3);
    let mut g_alpha = Volume::zeros(dims, 1);
    for i in 0..dims.voxels() {
        for c in 0..3 {
            let m = mean_color.data[i * 3 + c];
            if m >= R::zero() && m <= R::one() {
                g_color.data[i * 3 + c] = grad_mpi.data[i * 4 + c];
            }
        }
        g_alpha.data[i] = grad_mpi.data[i * 4 + 3];
    }
    (g_color, g_alpha)
}

/// Renders `target` from the MPI: warp every plane into the target camera,
/// then composite back to front.
pub fn render_novel_view<R: Real>(mpi: &Mpi<R>, target: &PinholeCamera) -> Result<Composite<R>> {
    let warps = RigWarps::new(&mpi.reference, std::slice::from_ref(target), &mpi.planes)?;
    Ok(render_with(&mpi.data, &warps, 0))
}

pub fn render_with<R: Real>(mpi: &Volume<R>, warps: &RigWarps<R>, view: usize) -> Composite<R> {
    composite_volume(&warps.volume_from_reference(view, mpi))
}

/// Gradient of [`render_with`] with respect to the reference-frame MPI.
pub fn render_backward<R: Real>(
    mpi: &Volume<R>,
    warps: &RigWarps<R>,
    view: usize,
    grad_rgb: &Image<R>,
    grad_alpha: &[R],
) -> Volume<R> {
    let warped = warps.volume_from_reference(view, mpi);
    let g = composite_volume_backward(&warped, grad_rgb, grad_alpha);
    warps.volume_from_reference_adjoint(view, &g)
}
