//! The recurrent alpha refiner: clues in, residual logit update out, the same
//! network weights at every iteration.

use serde::{Deserialize, Serialize};

use crate::error::{domain, shape, Result};
use crate::geometry::{average_reference_camera, DepthPlanes, PinholeCamera};
use crate::neural::{unet_backward_into, unet_forward, unet_infer, FeatureVolume, NetworkParams, Tape};
use crate::real::{sigmoid, Real};
use crate::render::{
    assemble_mpi, assemble_mpi_backward, clues_backward, clues_from_visibility, referenced_visibility_backward,
    referenced_visibility_with, AlphaVolume, Mpi, Reduction, VisibilityStack, VisualClues,
};
use crate::tensor::{Dims, Volume};
use crate::warp::{build_psv_with, ImageStack, PsvStack, RigWarps};

/// Number of feature channels fed to the network.
pub const FEATURE_CHANNELS: usize = 8;

#[derive(Debug, Clone)]
pub struct RefinerConfig {
    pub iterations: usize,
    pub planes: DepthPlanes,
    pub init_logit_empty: f64,
    pub init_logit_background: f64,
    pub reduction: Reduction,
}

/// Serializable part of [`RefinerConfig`] minus the planes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitLogits {
    pub empty: f64,
    pub background: f64,
}

impl Default for InitLogits {
    fn default() -> Self {
        Self {
            empty: -8.0,
            background: 8.0,
        }
    }
}

impl RefinerConfig {
    pub fn new(iterations: usize, planes: DepthPlanes) -> Result<Self> {
        let init = InitLogits::default();
        let config = Self {
            iterations,
            planes,
            init_logit_empty: init.empty,
            init_logit_background: init.background,
            reduction: Reduction::Sorted,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(domain!("the refiner needs at least one iteration"));
        }
        if sigmoid(self.init_logit_empty) >= 0.01 {
            return Err(domain!("empty logit {} is not transparent enough", self.init_logit_empty));
        }
        if sigmoid(self.init_logit_background) <= 0.99 {
            return Err(domain!(
                "background logit {} is not opaque enough",
                self.init_logit_background
            ));
        }
        Ok(())
    }
}

fn check_dims(dims: Dims) -> Result<()> {
    if dims.width % 4 != 0 || dims.height % 4 != 0 || dims.depth % 4 != 0 || dims.voxels() == 0 {
        return Err(domain!(
            "refiner volumes need width, height and plane count divisible by 4, got {dims}"
        ));
    }
    Ok(())
}

/// Empty geometry in front of an opaque farthest plane.
pub fn init_alpha<R: Real>(config: &RefinerConfig, reference: &PinholeCamera, dims: Dims) -> Result<AlphaVolume<R>> {
    config.validate()?;
    check_dims(dims)?;
    if dims.depth != config.planes.len() {
        return Err(shape!("{} planes configured but volume depth is {}", config.planes.len(), dims.depth));
    }
    let mut logits = Volume::filled(dims, 1, R::c(config.init_logit_empty));
    logits.plane_mut(0).fill(R::c(config.init_logit_background));
    Ok(AlphaVolume {
        logits,
        planes: config.planes.clone(),
        reference: reference.clone(),
    })
}

fn pack_features<R: Real>(logits: &Volume<R>, clues: &VisualClues<R>) -> FeatureVolume<R> {
    let dims = logits.dims;
    let v = dims.voxels();
    let mut f = FeatureVolume::zeros(FEATURE_CHANNELS, dims);
    f.data[..v].copy_from_slice(&logits.data);
    f.data[v..2 * v].copy_from_slice(&clues.total_visibility.data);
    for i in 0..v {
        for c in 0..3 {
            f.data[(2 + c) * v + i] = clues.mean_color.data[i * 3 + c];
            f.data[(5 + c) * v + i] = clues.color_variance.data[i * 3 + c];
        }
    }
    f
}

/// Inverse of the packing for gradients: (logits, clues).
fn unpack_features<R: Real>(f: &FeatureVolume<R>) -> (Volume<R>, VisualClues<R>) {
    let dims = f.dims;
    let v = dims.voxels();
    let mut mean = Volume::zeros(dims, 3);
    let mut var = Volume::zeros(dims, 3);
    for i in 0..v {
        for c in 0..3 {
            mean.data[i * 3 + c] = f.data[(2 + c) * v + i];
            var.data[i * 3 + c] = f.data[(5 + c) * v + i];
        }
    }
    (
        Volume {
            dims,
            channels: 1,
            data: f.data[..v].to_vec(),
        },
        VisualClues {
            total_visibility: Volume {
                dims,
                channels: 1,
                data: f.data[v..2 * v].to_vec(),
            },
            mean_color: mean,
            color_variance: var,
        },
    )
}

/// Feature channels: logits, total visibility / N, mean color, color variance.
pub fn assemble_features<R: Real>(alpha: &AlphaVolume<R>, psv: &PsvStack<R>) -> Result<FeatureVolume<R>> {
    let warps = RigWarps::new(&psv.reference, &psv.cameras, &psv.planes)?;
    assemble_features_with(alpha, psv, &warps, Reduction::Sorted)
}

pub fn assemble_features_with<R: Real>(
    alpha: &AlphaVolume<R>,
    psv: &PsvStack<R>,
    warps: &RigWarps<R>,
    reduction: Reduction,
) -> Result<FeatureVolume<R>> {
    if alpha.dims() != psv.dims() {
        return Err(shape!("alpha volume {} does not match PSV {}", alpha.dims(), psv.dims()));
    }
    let vis = referenced_visibility_with(&alpha.alphas(), warps, reduction);
    let clues = clues_from_visibility(psv, &vis, reduction);
    Ok(pack_features(&alpha.logits, &clues))
}

/// One residual refinement: `logits + network(features)`.
pub fn refine_step<R: Real>(
    alpha: &AlphaVolume<R>,
    psv: &PsvStack<R>,
    params: &NetworkParams<R>,
) -> Result<AlphaVolume<R>> {
    let warps = RigWarps::new(&psv.reference, &psv.cameras, &psv.planes)?;
    refine_step_with(alpha, psv, &warps, params, Reduction::Sorted)
}

pub fn refine_step_with<R: Real>(
    alpha: &AlphaVolume<R>,
    psv: &PsvStack<R>,
    warps: &RigWarps<R>,
    params: &NetworkParams<R>,
    reduction: Reduction,
) -> Result<AlphaVolume<R>> {
    let features = assemble_features_with(alpha, psv, warps, reduction)?;
    let delta = unet_infer(&features, params)?;
    let mut next = alpha.clone();
    for (l, &d) in next.logits.data.iter_mut().zip(&delta.data) {
        *l += d;
    }
    Ok(next)
}

/// Reference camera, plane sweep and warp plans for one set of input views.
#[derive(Debug, Clone)]
pub struct RefinerContext<R> {
    pub psv: PsvStack<R>,
    pub warps: RigWarps<R>,
}

impl<R: Real> RefinerContext<R> {
    pub fn new(images: &ImageStack<R>, planes: &DepthPlanes) -> Result<Self> {
        let reference = average_reference_camera(&images.cameras)?;
        check_dims(Dims::new(reference.width, reference.height, planes.len()))?;
        let warps = RigWarps::new(&reference, &images.cameras, planes)?;
        let psv = build_psv_with(images, &reference, planes, &warps);
        Ok(Self { psv, warps })
    }

    pub fn dims(&self) -> Dims {
        self.psv.dims()
    }

    pub fn reference(&self) -> &PinholeCamera {
        &self.psv.reference
    }
}

/// Runs `config.iterations` refinement steps from [`init_alpha`] and
/// colorizes the result.
pub fn run_refiner<R: Real>(
    images: &ImageStack<R>,
    config: &RefinerConfig,
    params: &NetworkParams<R>,
) -> Result<Mpi<R>> {
    config.validate()?;
    let ctx = RefinerContext::new(images, &config.planes)?;
    run_refiner_with(&ctx, config, params, |_, _| {})
}

/// [`run_refiner`] on a prepared context; `on_iteration(k, alpha)` sees the
/// logits after every step.
pub fn run_refiner_with<R: Real>(
    ctx: &RefinerContext<R>,
    config: &RefinerConfig,
    params: &NetworkParams<R>,
    mut on_iteration: impl FnMut(usize, &AlphaVolume<R>),
) -> Result<Mpi<R>> {
    let mut alpha = init_alpha(config, ctx.reference(), ctx.dims())?;
    for k in 0..config.iterations {
        alpha = refine_step_with(&alpha, &ctx.psv, &ctx.warps, params, config.reduction)?;
        on_iteration(k + 1, &alpha);
    }
    Ok(colorize_with(&alpha, ctx, config.reduction))
}

fn colorize_with<R: Real>(alpha: &AlphaVolume<R>, ctx: &RefinerContext<R>, reduction: Reduction) -> Mpi<R> {
    let alphas = alpha.alphas();
    let vis = referenced_visibility_with(&alphas, &ctx.warps, reduction);
    let clues = clues_from_visibility(&ctx.psv, &vis, reduction);
    assemble_mpi(&alphas, &clues.mean_color, &alpha.planes, &alpha.reference)
}

#[derive(Debug, Clone)]
struct Evaluation<R> {
    alphas: Volume<R>,
    vis: VisibilityStack<R>,
    clues: VisualClues<R>,
}

impl<R: Real> Evaluation<R> {
    fn new(logits: &Volume<R>, ctx: &RefinerContext<R>, reduction: Reduction) -> Self {
        let alphas = Volume {
            dims: logits.dims,
            channels: 1,
            data: logits.data.iter().map(|&l| sigmoid(l)).collect(),
        };
        let vis = referenced_visibility_with(&alphas, &ctx.warps, reduction);
        let clues = clues_from_visibility(&ctx.psv, &vis, reduction);
        Self { alphas, vis, clues }
    }

    /// Gradient of the clues (plus a direct alpha term) with respect to the logits.
    fn backward(&self, ctx: &RefinerContext<R>, grad_clues: &VisualClues<R>, grad_alpha: Option<&Volume<R>>) -> Volume<R> {
        let g_vstar = clues_backward(&ctx.psv, &self.vis, &self.clues, grad_clues);
        let mut g = referenced_visibility_backward(&self.vis, &g_vstar, &ctx.warps);
        if let Some(extra) = grad_alpha {
            for (a, &b) in g.data.iter_mut().zip(&extra.data) {
                *a += b;
            }
        }
        for (gl, &a) in g.data.iter_mut().zip(&self.alphas.data) {
            *gl *= a * (R::one() - a);
        }
        g
    }
}

/// Everything the backward pass needs from a training forward run.
#[derive(Debug, Clone)]
pub struct RefinerTrace<R> {
    steps: Vec<(Evaluation<R>, Tape<R>)>,
    last: Evaluation<R>,
    pub logits: Vec<Volume<R>>,
    pub mpi: Mpi<R>,
}

/// Forward run keeping activations of every iteration.
pub fn refine_traced<R: Real>(
    ctx: &RefinerContext<R>,
    config: &RefinerConfig,
    params: &NetworkParams<R>,
) -> Result<RefinerTrace<R>> {
    let init = init_alpha::<R>(config, ctx.reference(), ctx.dims())?;
    let mut logits = vec![init.logits];
    let mut steps = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let current = logits.last().expect("initial logits");
        let eval = Evaluation::new(current, ctx, config.reduction);
        let features = pack_features(current, &eval.clues);
        let (delta, tape) = unet_forward(&features, params)?;
        let mut next = current.clone();
        for (l, &d) in next.data.iter_mut().zip(&delta.data) {
            *l += d;
        }
        steps.push((eval, tape));
        logits.push(next);
    }
    let last = Evaluation::new(logits.last().expect("final logits"), ctx, config.reduction);
    let mpi = assemble_mpi(&last.alphas, &last.clues.mean_color, &config.planes, ctx.reference());
    Ok(RefinerTrace {
        steps,
        last,
        logits,
        mpi,
    })
}

/// Backpropagates an MPI gradient through colorization and all iterations,
/// adding parameter gradients into `grads`.
pub fn refine_backward<R: Real>(
    ctx: &RefinerContext<R>,
    trace: &RefinerTrace<R>,
    params: &NetworkParams<R>,
    grad_mpi: &Volume<R>,
    grads: &mut NetworkParams<R>,
) -> Result<()> {
    if grad_mpi.dims != ctx.dims() || grad_mpi.channels != 4 {
        return Err(shape!("MPI gradient does not match the refiner volume"));
    }
    let dims = ctx.dims();
    let (g_color, g_alpha) = assemble_mpi_backward(&trace.last.clues.mean_color, grad_mpi);
    let g_clues = VisualClues {
        total_visibility: Volume::zeros(dims, 1),
        mean_color: g_color,
        color_variance: Volume::zeros(dims, 3),
    };
    let mut g_logits = trace.last.backward(ctx, &g_clues, Some(&g_alpha));
    for (eval, tape) in trace.steps.iter().rev() {
        let g_delta = FeatureVolume {
            channels: 1,
            dims,
            data: g_logits.data.clone(),
        };
        let g_features = unet_backward_into(tape, &g_delta, params, grads)?;
        let (g_direct, g_clues) = unpack_features(&g_features);
        let g_through_clues = eval.backward(ctx, &g_clues, None);
        for ((g, &a), &b) in g_logits.data.iter_mut().zip(&g_direct.data).zip(&g_through_clues.data) {
            *g += a + b;
        }
    }
    Ok(())
}
