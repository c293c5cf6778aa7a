//! Dense containers shared by the warping, rendering and refinement code.
//!
//! Volumes are stored plane-major: voxel `(x, y, d)` lives at
//! `(d * height + y) * width + x`, with `channels` interleaved values per
//! voxel. Plane `d = 0` is the farthest.

use crate::error::{shape, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub width: usize,
    pub height: usize,
    pub depth: usize,
}

impl Dims {
    pub fn new(width: usize, height: usize, depth: usize) -> Self {
        Self {
            width,
            height,
            depth,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.width * self.height * self.depth
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, d: usize) -> usize {
        (d * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.width, self.height, self.depth)
    }
}

/// RGB image with interleaved channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<R> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<R>,
}

impl<R: Real> Image<R> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![R::zero(); width * height * 3],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape!(
                "image {width}x{height} needs {} values, got {}",
                width * height * 3,
                data.len()
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [R; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [R; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn cast<S: Real>(&self) -> Image<S> {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| S::c(v.f64())).collect(),
        }
    }
}

/// A `width x height x depth` grid with `channels` values per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<R> {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<R>,
}

impl<R: Real> Volume<R> {
    pub fn zeros(dims: Dims, channels: usize) -> Self {
        Self {
            dims,
            channels,
            data: vec![R::zero(); dims.voxels() * channels],
        }
    }

    pub fn filled(dims: Dims, channels: usize, value: R) -> Self {
        Self {
            dims,
            channels,
            data: vec![value; dims.voxels() * channels],
        }
    }

    pub fn from_vec(dims: Dims, channels: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != dims.voxels() * channels {
            return Err(shape!(
                "volume {dims} x {channels} needs {} values, got {}",
                dims.voxels() * channels,
                data.len()
            ));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, d: usize, c: usize) -> R {
        self.data[self.dims.index(x, y, d) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, d: usize, c: usize) -> &mut R {
        let i = self.dims.index(x, y, d) * self.channels + c;
        &mut self.data[i]
    }

    /// The interleaved values of plane `d`.
    pub fn plane(&self, d: usize) -> &[R] {
        let len = self.dims.plane() * self.channels;
        &self.data[d * len..(d + 1) * len]
    }

    pub fn plane_mut(&mut self, d: usize) -> &mut [R] {
        let len = self.dims.plane() * self.channels;
        &mut self.data[d * len..(d + 1) * len]
    }

    /// Copies channel range `[from, from + count)` into a new volume.
    pub fn channels_slice(&self, from: usize, count: usize) -> Volume<R> {
        let mut out = Volume::zeros(self.dims, count);
        for (dst, src) in out
            .data
            .chunks_exact_mut(count)
            .zip(self.data.chunks_exact(self.channels))
        {
            dst.copy_from_slice(&src[from..from + count]);
        }
        out
    }

    pub fn cast<S: Real>(&self) -> Volume<S> {
        Volume {
            dims: self.dims,
            channels: self.channels,
            data: self.data.iter().map(|v| S::c(v.f64())).collect(),
        }
    }
}
