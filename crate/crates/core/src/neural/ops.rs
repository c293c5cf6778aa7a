use rayon::prelude::*;

use super::{FeatureVolume, Padding};
use crate::error::{domain, shape, Result};
use crate::real::Real;
use crate::tensor::Dims;

use super::unet::Conv3dLayer;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Marks a padded tap in the im2col index tables.
const PAD: usize = usize::MAX;

/// Target column count of one im2col block.
const BLOCK_COLUMNS: usize = 4096;

/// Input index feeding output `o` through kernel tap `k`, per axis.
fn axis_taps(n_in: usize, n_out: usize, stride: usize, padding: Padding) -> [Vec<usize>; 3] {
    std::array::from_fn(|k| {
        (0..n_out)
            .map(|o| {
                let i = (o * stride + k) as isize - 1;
                if (0..n_in as isize).contains(&i) {
                    i as usize
                } else if padding == Padding::Circular {
                    i.rem_euclid(n_in as isize) as usize
                } else {
                    PAD
                }
            })
            .collect()
    })
}

struct ConvGeometry {
    c_in: usize,
    in_dims: Dims,
    out_dims: Dims,
    taps: [[Vec<usize>; 3]; 3],
    slices_per_block: usize,
}

impl ConvGeometry {
    fn new(in_dims: Dims, c_in: usize, stride: usize, padding: Padding) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(domain!("stride must be 1 or 2, got {stride}"));
        }
        if stride == 2 && (in_dims.width % 2 != 0 || in_dims.height % 2 != 0 || in_dims.depth % 2 != 0) {
            return Err(domain!("stride-2 convolution needs even dimensions, got {in_dims}"));
        }
        if in_dims.voxels() == 0 {
            return Err(domain!("empty input volume"));
        }
        let out_dims = Dims::new(in_dims.width / stride, in_dims.height / stride, in_dims.depth / stride);
        let taps = [
            axis_taps(in_dims.width, out_dims.width, stride, padding),
            axis_taps(in_dims.height, out_dims.height, stride, padding),
            axis_taps(in_dims.depth, out_dims.depth, stride, padding),
        ];
        Ok(Self {
            c_in,
            in_dims,
            out_dims,
            taps,
            slices_per_block: (BLOCK_COLUMNS / out_dims.plane()).max(1),
        })
    }

    fn rows(&self) -> usize {
        self.c_in * 27
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        (0..self.out_dims.depth)
            .step_by(self.slices_per_block)
            .map(|d0| (d0, (d0 + self.slices_per_block).min(self.out_dims.depth)))
            .collect()
    }

    /// Row-major `(c_in * 27) x n` patch matrix for output slices `[d0, d1)`.
    fn im2col<R: Real>(&self, input: &[R], d0: usize, d1: usize) -> Vec<R> {
        let od = self.out_dims;
        let n = (d1 - d0) * od.plane();
        let v_in = self.in_dims.voxels();
        let mut col = vec![R::zero(); self.rows() * n];
        let [tx, ty, td] = &self.taps;
        for ci in 0..self.c_in {
            let chan = &input[ci * v_in..(ci + 1) * v_in];
            for kd in 0..3 {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let row = ci * 27 + kd * 9 + ky * 3 + kx;
                        let dst = &mut col[row * n..(row + 1) * n];
                        let mut j = 0;
                        for z in d0..d1 {
                            let iz = td[kd][z];
                            for y in 0..od.height {
                                let iy = ty[ky][y];
                                if iz == PAD || iy == PAD {
                                    j += od.width;
                                    continue;
                                }
                                let base = (iz * self.in_dims.height + iy) * self.in_dims.width;
                                for &ix in &tx[kx] {
                                    if ix != PAD {
                                        dst[j] = chan[base + ix];
                                    }
                                    j += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Adds the patch-matrix gradient of input channel `ci` into `grad`.
    fn col2im_channel<R: Real>(&self, gcol: &[R], ci: usize, d0: usize, d1: usize, grad: &mut [R]) {
        let od = self.out_dims;
        let n = (d1 - d0) * od.plane();
        let [tx, ty, td] = &self.taps;
        for kd in 0..3 {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = ci * 27 + kd * 9 + ky * 3 + kx;
                    let src = &gcol[row * n..(row + 1) * n];
                    let mut j = 0;
                    for z in d0..d1 {
                        let iz = td[kd][z];
                        for y in 0..od.height {
                            let iy = ty[ky][y];
                            if iz == PAD || iy == PAD {
                                j += od.width;
                                continue;
                            }
                            let base = (iz * self.in_dims.height + iy) * self.in_dims.width;
                            for &ix in &tx[kx] {
                                if ix != PAD {
                                    grad[base + ix] += src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn check_layer<R: Real>(input: &FeatureVolume<R>, layer: &Conv3dLayer<R>) -> Result<()> {
    if input.channels != layer.c_in {
        return Err(domain!(
            "{} expects {} input channels, got {}",
            layer.name,
            layer.c_in,
            input.channels
        ));
    }
    if layer.kernel.len() != layer.c_out * layer.c_in * 27 || layer.bias.len() != layer.c_out {
        return Err(shape!("{} parameter arrays have the wrong length", layer.name));
    }
    Ok(())
}

/// Same-padded 3x3x3 convolution with zero padding.
pub fn conv3d_forward<R: Real>(input: &FeatureVolume<R>, layer: &Conv3dLayer<R>) -> Result<FeatureVolume<R>> {
    conv3d_forward_padded(input, layer, Padding::Zero)
}

pub fn conv3d_forward_padded<R: Real>(
    input: &FeatureVolume<R>,
    layer: &Conv3dLayer<R>,
    padding: Padding,
) -> Result<FeatureVolume<R>> {
    check_layer(input, layer)?;
    let geo = ConvGeometry::new(input.dims, layer.c_in, layer.stride, padding)?;
    let k = geo.rows();
    let plane = geo.out_dims.plane();
    let blocks = geo.blocks();
    let results: Vec<Vec<R>> = blocks
        .par_iter()
        .map(|&(d0, d1)| {
            let n = (d1 - d0) * plane;
            let col = geo.im2col(&input.data, d0, d1);
            let mut out = vec![R::zero(); layer.c_out * n];
            R::gemm(
                layer.c_out, k, n, R::one(), &layer.kernel, k as isize, 1, &col, n as isize, 1, R::zero(),
                &mut out, n as isize, 1,
            );
            out
        })
        .collect();
    let v_out = geo.out_dims.voxels();
    let mut output = FeatureVolume::zeros(layer.c_out, geo.out_dims);
    for (&(d0, d1), block) in blocks.iter().zip(&results) {
        let n = (d1 - d0) * plane;
        for co in 0..layer.c_out {
            let b = layer.bias[co];
            let dst = &mut output.data[co * v_out + d0 * plane..co * v_out + d0 * plane + n];
            for (o, &v) in dst.iter_mut().zip(&block[co * n..(co + 1) * n]) {
                *o = v + b;
            }
        }
    }
    Ok(output)
}

/// Gradients of [`conv3d_forward`] with respect to input, kernel and bias.
pub fn conv3d_backward<R: Real>(
    input: &FeatureVolume<R>,
    layer: &Conv3dLayer<R>,
    grad_output: &FeatureVolume<R>,
) -> Result<(FeatureVolume<R>, Vec<R>, Vec<R>)> {
    let mut gk = vec![R::zero(); layer.kernel.len()];
    let mut gb = vec![R::zero(); layer.bias.len()];
    let gi = conv3d_backward_padded(input, layer, grad_output, Padding::Zero, &mut gk, &mut gb)?;
    Ok((gi, gk, gb))
}

/// Like [`conv3d_backward`] but accumulates parameter gradients in place.
pub fn conv3d_backward_padded<R: Real>(
    input: &FeatureVolume<R>,
    layer: &Conv3dLayer<R>,
    grad_output: &FeatureVolume<R>,
    padding: Padding,
    grad_kernel: &mut [R],
    grad_bias: &mut [R],
) -> Result<FeatureVolume<R>> {
    check_layer(input, layer)?;
    let geo = ConvGeometry::new(input.dims, layer.c_in, layer.stride, padding)?;
    if grad_output.channels != layer.c_out || grad_output.dims != geo.out_dims {
        return Err(domain!(
            "{} gradient is {} x {}, expected {} x {}",
            layer.name,
            grad_output.channels,
            grad_output.dims,
            layer.c_out,
            geo.out_dims
        ));
    }
    if grad_kernel.len() != layer.kernel.len() || grad_bias.len() != layer.bias.len() {
        return Err(shape!("{} gradient buffers have the wrong length", layer.name));
    }
    let k = geo.rows();
    let plane = geo.out_dims.plane();
    let v_out = geo.out_dims.voxels();
    let blocks = geo.blocks();
    let partials: Vec<(Vec<R>, Vec<R>)> = blocks
        .par_iter()
        .map(|&(d0, d1)| {
            let n = (d1 - d0) * plane;
            let col = geo.im2col(&input.data, d0, d1);
            let g = &grad_output.data[d0 * plane..];
            let mut gk = vec![R::zero(); layer.c_out * k];
            R::gemm(
                layer.c_out, n, k, R::one(), g, v_out as isize, 1, &col, 1, n as isize, R::zero(), &mut gk,
                k as isize, 1,
            );
            let mut gcol = vec![R::zero(); k * n];
            R::gemm(
                k, layer.c_out, n, R::one(), &layer.kernel, 1, k as isize, g, v_out as isize, 1, R::zero(),
                &mut gcol, n as isize, 1,
            );
            (gk, gcol)
        })
        .collect();
    for (gk, _) in &partials {
        for (acc, &v) in grad_kernel.iter_mut().zip(gk) {
            *acc += v;
        }
    }
    for (co, gb) in grad_bias.iter_mut().enumerate() {
        let mut s = R::zero();
        for &v in &grad_output.data[co * v_out..(co + 1) * v_out] {
            s += v;
        }
        *gb += s;
    }
    let v_in = input.dims.voxels();
    let mut grad_input = FeatureVolume::zeros(layer.c_in, input.dims);
    grad_input
        .data
        .par_chunks_mut(v_in)
        .enumerate()
        .for_each(|(ci, dst)| {
            for (&(d0, d1), (_, gcol)) in blocks.iter().zip(&partials) {
                geo.col2im_channel(gcol, ci, d0, d1, dst);
            }
        });
    Ok(grad_input)
}

/// Per-channel statistics saved by the instance-norm forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<R> {
    pub mean: Vec<R>,
    pub inv_std: Vec<R>,
}

pub fn instance_norm_forward<R: Real>(
    input: &FeatureVolume<R>,
    scale: &[R],
    shift: &[R],
) -> Result<(FeatureVolume<R>, NormStats<R>)> {
    let v = input.dims.voxels();
    // a single voxel normalizes to zero; the epsilon keeps it finite
    if v == 0 {
        return Err(domain!("instance normalization of an empty volume"));
    }
    if scale.len() != input.channels || shift.len() != input.channels {
        return Err(shape!("norm parameters do not match {} channels", input.channels));
    }
    let n = R::c(v as f64);
    let eps = R::c(INSTANCE_NORM_EPS);
    let mut out = FeatureVolume::zeros(input.channels, input.dims);
    let stats: Vec<(R, R)> = out
        .data
        .par_chunks_mut(v)
        .zip(input.data.par_chunks(v))
        .enumerate()
        .map(|(c, (dst, src))| {
            let mean = src.iter().copied().sum::<R>() / n;
            let var = src.iter().map(|&x| (x - mean) * (x - mean)).sum::<R>() / n;
            let inv_std = R::one() / (var + eps).sqrt();
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = scale[c] * (x - mean) * inv_std + shift[c];
            }
            (mean, inv_std)
        })
        .collect();
    let (mean, inv_std) = stats.into_iter().unzip();
    Ok((out, NormStats { mean, inv_std }))
}

/// Returns the input gradient and accumulates the affine-parameter gradients.
pub fn instance_norm_backward<R: Real>(
    input: &FeatureVolume<R>,
    stats: &NormStats<R>,
    scale: &[R],
    grad_output: &FeatureVolume<R>,
    grad_scale: &mut [R],
    grad_shift: &mut [R],
) -> FeatureVolume<R> {
    let v = input.dims.voxels();
    let n = R::c(v as f64);
    let mut grad = FeatureVolume::zeros(input.channels, input.dims);
    let sums: Vec<(R, R)> = grad
        .data
        .par_chunks_mut(v)
        .zip(input.data.par_chunks(v))
        .zip(grad_output.data.par_chunks(v))
        .enumerate()
        .map(|(c, ((dst, x), g))| {
            let (mean, inv_std) = (stats.mean[c], stats.inv_std[c]);
            let mut sum_g = R::zero();
            let mut sum_gx = R::zero();
            for (&xi, &gi) in x.iter().zip(g) {
                sum_g += gi;
                sum_gx += gi * (xi - mean) * inv_std;
            }
            let k = scale[c] * inv_std / n;
            for ((o, &xi), &gi) in dst.iter_mut().zip(x).zip(g) {
                let xhat = (xi - mean) * inv_std;
                *o = k * (n * gi - sum_g - xhat * sum_gx);
            }
            (sum_gx, sum_g)
        })
        .collect();
    for (c, (sgx, sg)) in sums.into_iter().enumerate() {
        grad_scale[c] += sgx;
        grad_shift[c] += sg;
    }
    grad
}

pub fn relu_forward<R: Real>(input: &mut FeatureVolume<R>) {
    for v in input.data.iter_mut() {
        if *v < R::zero() {
            *v = R::zero();
        }
    }
}

/// Zeroes the gradient wherever the ReLU output was not positive.
pub fn relu_backward<R: Real>(output: &FeatureVolume<R>, grad: &mut FeatureVolume<R>) {
    for (g, &y) in grad.data.iter_mut().zip(&output.data) {
        if y <= R::zero() {
            *g = R::zero();
        }
    }
}

/// Source taps `(i0, i1, t)` of each output sample along one axis.
fn upsample_taps<R: Real>(n: usize, padding: Padding) -> Vec<(usize, usize, R)> {
    (0..2 * n)
        .map(|i| {
            let src = i as f64 / 2.0 - 0.25;
            match padding {
                Padding::Zero => {
                    let s = src.clamp(0.0, (n - 1) as f64);
                    let i0 = s.floor() as usize;
                    let i1 = (i0 + 1).min(n - 1);
                    (i0, i1, R::c(s - i0 as f64))
                }
                Padding::Circular => {
                    let f = src.floor();
                    let i0 = (f as isize).rem_euclid(n as isize) as usize;
                    (i0, (i0 + 1) % n, R::c(src - f))
                }
            }
        })
        .collect()
}

/// Doubles axis `(outer, n, inner)` of a flat array.
fn upsample_axis<R: Real>(src: &[R], outer: usize, n: usize, inner: usize, padding: Padding) -> Vec<R> {
    let taps = upsample_taps::<R>(n, padding);
    let mut out = vec![R::zero(); outer * 2 * n * inner];
    out.par_chunks_mut(2 * n * inner)
        .zip(src.par_chunks(n * inner))
        .for_each(|(dst, s)| {
            for (i, &(i0, i1, t)) in taps.iter().enumerate() {
                let (a, b) = (&s[i0 * inner..(i0 + 1) * inner], &s[i1 * inner..(i1 + 1) * inner]);
                for ((o, &va), &vb) in dst[i * inner..(i + 1) * inner].iter_mut().zip(a).zip(b) {
                    *o = va + t * (vb - va);
                }
            }
        });
    out
}

fn upsample_axis_adjoint<R: Real>(src: &[R], outer: usize, n: usize, inner: usize, padding: Padding) -> Vec<R> {
    let taps = upsample_taps::<R>(n, padding);
    let mut out = vec![R::zero(); outer * n * inner];
    out.par_chunks_mut(n * inner)
        .zip(src.par_chunks(2 * n * inner))
        .for_each(|(dst, s)| {
            for (i, &(i0, i1, t)) in taps.iter().enumerate() {
                for j in 0..inner {
                    let g = s[i * inner + j];
                    dst[i0 * inner + j] += (R::one() - t) * g;
                    dst[i1 * inner + j] += t * g;
                }
            }
        });
    out
}

/// 2x trilinear up-sampling, half-pixel centers, borders clamped (or wrapped).
pub fn trilinear_upsample2x<R: Real>(input: &FeatureVolume<R>, padding: Padding) -> FeatureVolume<R> {
    let (c, d) = (input.channels, input.dims);
    let x = upsample_axis(&input.data, c * d.depth * d.height, d.width, 1, padding);
    let y = upsample_axis(&x, c * d.depth, d.height, 2 * d.width, padding);
    let z = upsample_axis(&y, c, d.depth, 4 * d.plane(), padding);
    FeatureVolume {
        channels: c,
        dims: Dims::new(2 * d.width, 2 * d.height, 2 * d.depth),
        data: z,
    }
}

/// Adjoint of [`trilinear_upsample2x`]; `input_dims` are the low-resolution dims.
pub fn trilinear_upsample2x_adjoint<R: Real>(
    grad: &FeatureVolume<R>,
    input_dims: Dims,
    padding: Padding,
) -> FeatureVolume<R> {
    let (c, d) = (grad.channels, input_dims);
    let z = upsample_axis_adjoint(&grad.data, c, d.depth, 4 * d.plane(), padding);
    let y = upsample_axis_adjoint(&z, c * d.depth, d.height, 2 * d.width, padding);
    let x = upsample_axis_adjoint(&y, c * d.depth * d.height, d.width, 1, padding);
    FeatureVolume {
        channels: c,
        dims: d,
        data: x,
    }
}

pub fn concat_channels<R: Real>(a: &FeatureVolume<R>, b: &FeatureVolume<R>) -> Result<FeatureVolume<R>> {
    if a.dims != b.dims {
        return Err(shape!("cannot concatenate {} and {} volumes", a.dims, b.dims));
    }
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Ok(FeatureVolume {
        channels: a.channels + b.channels,
        dims: a.dims,
        data,
    })
}

/// Splits a gradient after the first `first` channels.
pub fn split_channels<R: Real>(v: &FeatureVolume<R>, first: usize) -> (FeatureVolume<R>, FeatureVolume<R>) {
    let cut = first * v.dims.voxels();
    (
        FeatureVolume {
            channels: first,
            dims: v.dims,
            data: v.data[..cut].to_vec(),
        },
        FeatureVolume {
            channels: v.channels - first,
            dims: v.dims,
            data: v.data[cut..].to_vec(),
        },
    )
}
