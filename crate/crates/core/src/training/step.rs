//! Loss, gradient and the optimizer step for one batch.

use serde::{Deserialize, Serialize};

use super::config::Batch;
use crate::error::{Error, Result};
use crate::metrics::{mae, psnr, ssim_with_grad_params, SsimParams, PSNR_CAP};
use crate::neural::{adam_step, AdamState, NetworkParams};
use crate::real::Real;
use crate::refiner::{refine_backward, refine_traced, RefinerConfig, RefinerContext};
use crate::render::{render_backward, render_with, Reduction};
use crate::tensor::{Image, Volume};
use crate::warp::RigWarps;

/// How the supervision signal is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSettings {
    pub iterations: usize,
    pub reduction: Reduction,
    pub background: f64,
    pub ssim: SsimParams,
}

/// Loss and image metrics of one batch, averaged over the target views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// `1 - mean SSIM` over the targets and its gradient with respect to every
/// network parameter.
pub fn batch_loss_and_grad<R: Real>(
    params: &NetworkParams<R>,
    batch: &Batch<R>,
    settings: &LossSettings,
) -> Result<(StepStats, NetworkParams<R>)> {
    let mut config = RefinerConfig::new(settings.iterations, batch.planes.clone())?;
    config.reduction = settings.reduction;
    let ctx = RefinerContext::new(&batch.inputs, &batch.planes)?;
    let trace = refine_traced(&ctx, &config, params)?;
    let target_cams: Vec<_> = batch.targets.iter().map(|t| t.0.clone()).collect();
    let warps = RigWarps::new(ctx.reference(), &target_cams, &batch.planes)?;
    let bg = R::c(settings.background);
    let scale = R::c(1.0 / batch.targets.len() as f64);
    let mut grad_mpi = Volume::zeros(trace.mpi.data.dims, 4);
    let mut stats = StepStats {
        loss: 1.0,
        psnr: 0.0,
        ssim: 0.0,
        mae: 0.0,
    };
    for (t, (_, truth)) in batch.targets.iter().enumerate() {
        let comp = render_with(&trace.mpi.data, &warps, t);
        let shown = comp.over_background([bg; 3]);
        let (s, g_img) = ssim_with_grad_params(&shown, truth, &settings.ssim)?;
        stats.ssim += s.f64() / batch.targets.len() as f64;
        stats.psnr += psnr(&shown, truth)?.min(PSNR_CAP) / batch.targets.len() as f64;
        stats.mae += mae(&shown, truth)? / batch.targets.len() as f64;
        // d(loss)/d(shown) = -g / T; shown = rgb + (1 - alpha) * bg
        let g_rgb = Image {
            width: g_img.width,
            height: g_img.height,
            data: g_img.data.iter().map(|&g| -g * scale).collect(),
        };
        let g_alpha: Vec<R> = g_rgb.data.chunks_exact(3).map(|px| -(px[0] + px[1] + px[2]) * bg).collect();
        let g = render_backward(&trace.mpi.data, &warps, t, &g_rgb, &g_alpha);
        for (a, &b) in grad_mpi.data.iter_mut().zip(&g.data) {
            *a += b;
        }
    }
    stats.loss = 1.0 - stats.ssim;
    if !stats.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {}", stats.loss)));
    }
    let mut grads = params.zeros_like();
    refine_backward(&ctx, &trace, params, &grad_mpi, &mut grads)?;
    Ok((stats, grads))
}

/// One online Adam step on a single batch.
pub fn training_step<R: Real>(
    params: &mut NetworkParams<R>,
    state: &mut AdamState<R>,
    batch: &Batch<R>,
    settings: &LossSettings,
) -> Result<StepStats> {
    let (stats, grads) = batch_loss_and_grad(params, batch, settings)?;
    adam_step(params, &grads, state)?;
    Ok(stats)
}
