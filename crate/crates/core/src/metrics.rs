//! Image quality metrics and the SSIM gradient used as the training loss.

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::real::Real;
use crate::tensor::Image;

/// Finite stand-in for the infinite PSNR of identical images in textual output.
pub const PSNR_CAP: f64 = 99.0;

/// Gaussian-window SSIM constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    fn kernel(&self) -> Vec<f64> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let t = i as f64 - half;
                (-t * t / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

impl ImageMetrics {
    /// Same metrics with an infinite PSNR replaced by [`PSNR_CAP`].
    pub fn capped(self) -> Self {
        Self {
            psnr: self.psnr.min(PSNR_CAP),
            ..self
        }
    }
}

fn check_pair<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<()> {
    if pred.width != target.width || pred.height != target.height {
        return Err(shape!(
            "image sizes differ: {}x{} vs {}x{}",
            pred.width,
            pred.height,
            target.width,
            target.height
        ));
    }
    Ok(())
}

/// PSNR in dB for peak 1.0; `+inf` for identical images.
pub fn psnr<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<f64> {
    check_pair(pred, target)?;
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum::<f64>()
        / pred.data.len().max(1) as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

pub fn mae<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<f64> {
    check_pair(pred, target)?;
    Ok(pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a.f64() - b.f64()).abs())
        .sum::<f64>()
        / pred.data.len().max(1) as f64)
}

pub fn image_metrics<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        psnr: psnr(pred, target)?,
        ssim: ssim(pred, target)?.f64(),
        mae: mae(pred, target)?,
    })
}

/// Mean SSIM over valid window positions and the three channels.
pub fn ssim<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<R> {
    ssim_impl(pred, target, &SsimParams::default(), false).map(|(s, _)| s)
}

/// SSIM and its gradient with respect to `pred`.
pub fn ssim_with_grad<R: Real>(pred: &Image<R>, target: &Image<R>) -> Result<(R, Image<R>)> {
    ssim_impl(pred, target, &SsimParams::default(), true).map(|(s, g)| (s, g.expect("gradient requested")))
}

/// [`ssim_with_grad`] with explicit window and constants.
pub fn ssim_with_grad_params<R: Real>(pred: &Image<R>, target: &Image<R>, params: &SsimParams) -> Result<(R, Image<R>)> {
    ssim_impl(pred, target, params, true).map(|(s, g)| (s, g.expect("gradient requested")))
}

/// Separable 'valid' filter of a `w x h` map.
fn filter_valid<R: Real>(src: &[R], w: usize, h: usize, k: &[R]) -> Vec<R> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![R::zero(); ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            let mut acc = R::zero();
            for (j, &kj) in k.iter().enumerate() {
                acc += kj * line[x + j];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![R::zero(); ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = R::zero();
            for (j, &kj) in k.iter().enumerate() {
                acc += kj * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads an `ow x oh` map back to `w x h`.
fn filter_valid_adjoint<R: Real>(src: &[R], w: usize, h: usize, k: &[R]) -> Vec<R> {
    let n = k.len();
    let (ow, oh) = (w + 1 - n, h + 1 - n);
    let mut rows = vec![R::zero(); ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (j, &kj) in k.iter().enumerate() {
                rows[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![R::zero(); w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (j, &kj) in k.iter().enumerate() {
                out[y * w + x + j] += kj * v;
            }
        }
    }
    out
}

fn ssim_impl<R: Real>(
    pred: &Image<R>,
    target: &Image<R>,
    params: &SsimParams,
    want_grad: bool,
) -> Result<(R, Option<Image<R>>)> {
    check_pair(pred, target)?;
    let (w, h) = (pred.width, pred.height);
    if w < params.window || h < params.window {
        return Err(shape!(
            "SSIM needs images of at least {0}x{0}, got {w}x{h}",
            params.window
        ));
    }
    let k: Vec<R> = params.kernel().into_iter().map(R::c).collect();
    let c1 = R::c((params.k1 * 1.0).powi(2));
    let c2 = R::c((params.k2 * 1.0).powi(2));
    let two = R::c(2.0);
    let (ow, oh) = (w + 1 - params.window, h + 1 - params.window);
    let count = R::c((ow * oh * 3) as f64);
    let mut total = R::zero();
    let mut grad = want_grad.then(|| Image::zeros(w, h));
    for c in 0..3 {
        let x: Vec<R> = pred.data.iter().skip(c).step_by(3).copied().collect();
        let y: Vec<R> = target.data.iter().skip(c).step_by(3).copied().collect();
        let sq = |a: &[R], b: &[R]| a.iter().zip(b).map(|(&p, &q)| p * q).collect::<Vec<R>>();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let mxx = filter_valid(&sq(&x, &x), w, h, &k);
        let myy = filter_valid(&sq(&y, &y), w, h, &k);
        let mxy = filter_valid(&sq(&x, &y), w, h, &k);
        let mut d_mx = vec![R::zero(); ow * oh];
        let mut d_mxx = vec![R::zero(); ow * oh];
        let mut d_mxy = vec![R::zero(); ow * oh];
        for i in 0..ow * oh {
            let (ux, uy) = (mx[i], my[i]);
            let a1 = two * ux * uy + c1;
            let a2 = two * (mxy[i] - ux * uy) + c2;
            let b1 = ux * ux + uy * uy + c1;
            let b2 = (mxx[i] - ux * ux) + (myy[i] - uy * uy) + c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let s = s / count;
                d_mx[i] = s * (two * uy / a1 - two * uy / a2 - two * ux / b1 + two * ux / b2);
                d_mxx[i] = -s / b2;
                d_mxy[i] = two * s / a2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ga = filter_valid_adjoint(&d_mx, w, h, &k);
            let gb = filter_valid_adjoint(&d_mxx, w, h, &k);
            let gc = filter_valid_adjoint(&d_mxy, w, h, &k);
            for p in 0..w * h {
                g.data[p * 3 + c] = ga[p] + two * x[p] * gb[p] + y[p] * gc[p];
            }
        }
    }
    Ok((total / count, grad))
}
