//! Dense 3D network kernels, the refiner U-Net and its optimizer.

mod adam;
mod ops;
mod unet;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use ops::{
    concat_channels, conv3d_backward, conv3d_backward_padded, conv3d_forward, conv3d_forward_padded,
    instance_norm_backward, instance_norm_forward, relu_backward, relu_forward, split_channels,
    trilinear_upsample2x, trilinear_upsample2x_adjoint, NormStats, INSTANCE_NORM_EPS,
};
pub use unet::{
    init_params, layer_specs, unet_backward, unet_backward_into, unet_forward, unet_forward_with, unet_infer,
    Conv3dLayer,
    LayerSpec, NetworkParams, Tape,
};

use crate::error::{shape, Result};
use crate::real::Real;
use crate::tensor::{Dims, Volume};

/// Boundary handling of convolutions and up-sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Zero padding; what the refiner uses.
    #[default]
    Zero,
    /// Periodic boundaries.
    Circular,
}

/// Channel-planar activations: value `(c, x, y, d)` at
/// `c * voxels + (d * height + y) * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVolume<R> {
    pub channels: usize,
    pub dims: Dims,
    pub data: Vec<R>,
}

impl<R: Real> FeatureVolume<R> {
    pub fn zeros(channels: usize, dims: Dims) -> Self {
        Self {
            channels,
            dims,
            data: vec![R::zero(); channels * dims.voxels()],
        }
    }

    pub fn from_vec(channels: usize, dims: Dims, data: Vec<R>) -> Result<Self> {
        if data.len() != channels * dims.voxels() {
            return Err(shape!(
                "feature volume {channels} x {dims} needs {} values, got {}",
                channels * dims.voxels(),
                data.len()
            ));
        }
        Ok(Self { channels, dims, data })
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, d: usize) -> R {
        self.data[c * self.dims.voxels() + self.dims.index(x, y, d)]
    }

    pub fn channel(&self, c: usize) -> &[R] {
        let v = self.dims.voxels();
        &self.data[c * v..(c + 1) * v]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [R] {
        let v = self.dims.voxels();
        &mut self.data[c * v..(c + 1) * v]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts an interleaved [`Volume`].
    pub fn from_volume(vol: &Volume<R>) -> Self {
        let v = vol.dims.voxels();
        let mut out = Self::zeros(vol.channels, vol.dims);
        for (i, px) in vol.data.chunks_exact(vol.channels).enumerate() {
            for (c, &val) in px.iter().enumerate() {
                out.data[c * v + i] = val;
            }
        }
        out
    }

    pub fn to_volume(&self) -> Volume<R> {
        let v = self.dims.voxels();
        let mut out = Volume::zeros(self.dims, self.channels);
        for (i, px) in out.data.chunks_exact_mut(self.channels).enumerate() {
            for (c, val) in px.iter_mut().enumerate() {
                *val = self.data[c * v + i];
            }
        }
        out
    }
}
