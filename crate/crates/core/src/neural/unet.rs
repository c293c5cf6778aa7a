use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ops::{
    concat_channels, conv3d_backward_padded, conv3d_forward_padded, instance_norm_backward,
    instance_norm_forward, relu_backward, relu_forward, split_channels, trilinear_upsample2x,
    trilinear_upsample2x_adjoint, NormStats,
};
use super::{FeatureVolume, Padding};
use crate::error::{domain, shape, Error, Result};
use crate::real::Real;
use crate::tensor::Dims;

/// Static description of one convolution of the refiner network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: &'static str,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

const fn spec(name: &'static str, c_in: usize, c_out: usize, stride: usize) -> LayerSpec {
    LayerSpec {
        name,
        c_in,
        c_out,
        stride,
    }
}

const LAYERS: [LayerSpec; 17] = [
    spec("conv1_1", 8, 8, 1),
    spec("conv1_2", 8, 8, 1),
    spec("conv1_3", 8, 16, 2),
    spec("conv2_1", 16, 16, 1),
    spec("conv2_2", 16, 16, 1),
    spec("conv2_3", 16, 32, 2),
    spec("conv3_1", 32, 32, 1),
    spec("conv3_2", 32, 32, 1),
    spec("conv3_3", 32, 32, 1),
    spec("conv3_4", 32, 32, 1),
    spec("conv2_4", 32, 16, 1),
    spec("conv2_5", 32, 16, 1),
    spec("conv2_6", 16, 16, 1),
    spec("conv1_4", 16, 8, 1),
    spec("conv1_5", 16, 8, 1),
    spec("conv1_6", 8, 8, 1),
    spec("conv1_7", 8, 1, 1),
];

/// Layers in execution order.
pub fn layer_specs() -> &'static [LayerSpec] {
    &LAYERS
}

/// A 3x3x3 convolution with optional instance norm and ReLU.
///
/// `kernel` is laid out `[c_out][c_in][kd][ky][kx]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3dLayer<R> {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub kernel: Vec<R>,
    pub bias: Vec<R>,
    pub has_norm: bool,
    pub has_activation: bool,
    pub norm_scale: Vec<R>,
    pub norm_shift: Vec<R>,
}

impl<R: Real> Conv3dLayer<R> {
    /// Zero kernel and bias, identity affine norm.
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        has_norm: bool,
        has_activation: bool,
    ) -> Self {
        let norm = if has_norm { c_out } else { 0 };
        Self {
            name: name.to_string(),
            c_in,
            c_out,
            stride,
            kernel: vec![R::zero(); c_out * c_in * 27],
            bias: vec![R::zero(); c_out],
            has_norm,
            has_activation,
            norm_scale: vec![R::one(); norm],
            norm_shift: vec![R::zero(); norm],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel.len() + self.bias.len() + self.norm_scale.len() + self.norm_shift.len()
    }
}

/// The shared weights of the refiner U-Net.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<R> {
    pub layers: Vec<Conv3dLayer<R>>,
}

impl<R: Real> NetworkParams<R> {
    /// The architecture with zero kernels and identity norms.
    pub fn architecture() -> Self {
        let last = LAYERS.len() - 1;
        Self {
            layers: LAYERS
                .iter()
                .enumerate()
                .map(|(i, s)| Conv3dLayer::new(s.name, s.c_in, s.c_out, s.stride, i != last, i != last))
                .collect(),
        }
    }

    /// Same shapes, every value zero; the layout of a gradient.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, t) in out.tensors_mut() {
            t.fill(R::zero());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Conv3dLayer::parameter_count).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&Conv3dLayer<R>> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Named tensors with their shapes in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[R])> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push((format!("{}.weight", l.name), vec![l.c_out, l.c_in, 3, 3, 3], &l.kernel[..]));
            out.push((format!("{}.bias", l.name), vec![l.c_out], &l.bias[..]));
            if l.has_norm {
                out.push((format!("{}.norm_scale", l.name), vec![l.c_out], &l.norm_scale[..]));
                out.push((format!("{}.norm_shift", l.name), vec![l.c_out], &l.norm_shift[..]));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [R])> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            let shape = vec![l.c_out, l.c_in, 3, 3, 3];
            out.push((format!("{}.weight", l.name), shape, &mut l.kernel[..]));
            out.push((format!("{}.bias", l.name), vec![l.c_out], &mut l.bias[..]));
            if l.has_norm {
                out.push((format!("{}.norm_scale", l.name), vec![l.c_out], &mut l.norm_scale[..]));
                out.push((format!("{}.norm_shift", l.name), vec![l.c_out], &mut l.norm_shift[..]));
            }
        }
        out
    }

    /// All values in [`tensors`](Self::tensors) order.
    pub fn flatten(&self) -> Vec<R> {
        self.tensors().into_iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    pub fn cast<S: Real>(&self) -> NetworkParams<S> {
        let conv = |v: &[R]| v.iter().map(|x| S::c(x.f64())).collect::<Vec<S>>();
        NetworkParams {
            layers: self
                .layers
                .iter()
                .map(|l| Conv3dLayer {
                    name: l.name.clone(),
                    c_in: l.c_in,
                    c_out: l.c_out,
                    stride: l.stride,
                    kernel: conv(&l.kernel),
                    bias: conv(&l.bias),
                    has_norm: l.has_norm,
                    has_activation: l.has_activation,
                    norm_scale: conv(&l.norm_scale),
                    norm_shift: conv(&l.norm_shift),
                })
                .collect(),
        }
    }

    /// Checks that the layers match the refiner architecture.
    pub fn validate(&self) -> Result<()> {
        let reference = Self::architecture();
        if self.layers.len() != reference.layers.len() {
            return Err(shape!("expected {} layers, found {}", reference.layers.len(), self.layers.len()));
        }
        for (a, b) in self.layers.iter().zip(&reference.layers) {
            let same = a.name == b.name
                && a.c_in == b.c_in
                && a.c_out == b.c_out
                && a.stride == b.stride
                && a.has_norm == b.has_norm
                && a.has_activation == b.has_activation
                && a.kernel.len() == b.kernel.len()
                && a.bias.len() == b.bias.len()
                && a.norm_scale.len() == b.norm_scale.len()
                && a.norm_shift.len() == b.norm_shift.len();
            if !same {
                return Err(shape!("layer {} does not match the architecture", a.name));
            }
        }
        Ok(())
    }
}

/// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases, identity norms.
pub fn init_params<R: Real>(seed: u64) -> NetworkParams<R> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetworkParams::architecture();
    for l in &mut params.layers {
        let std = (2.0 / (l.c_in * 27) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in l.kernel.iter_mut() {
            *w = R::c(normal.sample(&mut rng));
        }
    }
    params
}

#[derive(Debug, Clone)]
struct LayerRecord<R> {
    input: FeatureVolume<R>,
    pre_norm: Option<(FeatureVolume<R>, NormStats<R>)>,
    output: FeatureVolume<R>,
}

/// Activations saved by [`unet_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape<R> {
    padding: Padding,
    input_dims: Dims,
    records: Vec<LayerRecord<R>>,
}

impl<R: Real> Tape<R> {
    pub fn input_dims(&self) -> Dims {
        self.input_dims
    }
}

fn run_layer<R: Real>(
    input: FeatureVolume<R>,
    layer: &Conv3dLayer<R>,
    padding: Padding,
    records: &mut Option<Vec<LayerRecord<R>>>,
) -> Result<FeatureVolume<R>> {
    let z = conv3d_forward_padded(&input, layer, padding)?;
    let (mut y, pre_norm) = if layer.has_norm {
        let (y, stats) = instance_norm_forward(&z, &layer.norm_scale, &layer.norm_shift)?;
        (y, Some((z, stats)))
    } else {
        (z, None)
    };
    if layer.has_activation {
        relu_forward(&mut y);
    }
    if !y.is_finite() {
        return Err(Error::NonFinite(format!("output of {}", layer.name)));
    }
    if let Some(r) = records.as_mut() {
        r.push(LayerRecord {
            input,
            pre_norm,
            output: y.clone(),
        });
    }
    Ok(y)
}

fn check_features<R: Real>(features: &FeatureVolume<R>, params: &NetworkParams<R>) -> Result<()> {
    let d = features.dims;
    if d.width % 4 != 0 || d.height % 4 != 0 || d.depth % 4 != 0 || d.voxels() == 0 {
        return Err(domain!(
            "U-Net input must have width, height and depth divisible by 4, got {d}"
        ));
    }
    if features.channels != LAYERS[0].c_in {
        return Err(domain!("U-Net expects {} feature channels, got {}", LAYERS[0].c_in, features.channels));
    }
    params.validate()
}

fn forward_impl<R: Real>(
    features: &FeatureVolume<R>,
    params: &NetworkParams<R>,
    padding: Padding,
    record: bool,
) -> Result<(FeatureVolume<R>, Option<Tape<R>>)> {
    check_features(features, params)?;
    let mut rec = record.then(|| Vec::with_capacity(LAYERS.len()));
    let l = &params.layers;
    let a0 = run_layer(features.clone(), &l[0], padding, &mut rec)?;
    let skip1 = run_layer(a0, &l[1], padding, &mut rec)?;
    let a2 = run_layer(skip1.clone(), &l[2], padding, &mut rec)?;
    let a3 = run_layer(a2, &l[3], padding, &mut rec)?;
    let skip2 = run_layer(a3, &l[4], padding, &mut rec)?;
    let mut a = run_layer(skip2.clone(), &l[5], padding, &mut rec)?;
    for layer in &l[6..11] {
        a = run_layer(a, layer, padding, &mut rec)?;
    }
    let up2 = trilinear_upsample2x(&a, padding);
    let a11 = run_layer(concat_channels(&skip2, &up2)?, &l[11], padding, &mut rec)?;
    let a12 = run_layer(a11, &l[12], padding, &mut rec)?;
    let a13 = run_layer(a12, &l[13], padding, &mut rec)?;
    let up1 = trilinear_upsample2x(&a13, padding);
    let a14 = run_layer(concat_channels(&skip1, &up1)?, &l[14], padding, &mut rec)?;
    let a15 = run_layer(a14, &l[15], padding, &mut rec)?;
    let out = run_layer(a15, &l[16], padding, &mut rec)?;
    let tape = rec.map(|records| Tape {
        padding,
        input_dims: features.dims,
        records,
    });
    Ok((out, tape))
}

/// Runs the refiner network with zero padding; returns the 1-channel output
/// and the tape for [`unet_backward`].
pub fn unet_forward<R: Real>(
    features: &FeatureVolume<R>,
    params: &NetworkParams<R>,
) -> Result<(FeatureVolume<R>, Tape<R>)> {
    unet_forward_with(features, params, Padding::Zero)
}

pub fn unet_forward_with<R: Real>(
    features: &FeatureVolume<R>,
    params: &NetworkParams<R>,
    padding: Padding,
) -> Result<(FeatureVolume<R>, Tape<R>)> {
    let (out, tape) = forward_impl(features, params, padding, true)?;
    Ok((out, tape.expect("tape recorded")))
}

/// Forward pass without keeping activations.
pub fn unet_infer<R: Real>(features: &FeatureVolume<R>, params: &NetworkParams<R>) -> Result<FeatureVolume<R>> {
    Ok(forward_impl(features, params, Padding::Zero, false)?.0)
}

fn layer_backward<R: Real>(
    record: &LayerRecord<R>,
    layer: &Conv3dLayer<R>,
    grad_layer: &mut Conv3dLayer<R>,
    mut grad: FeatureVolume<R>,
    padding: Padding,
) -> Result<FeatureVolume<R>> {
    if layer.has_activation {
        relu_backward(&record.output, &mut grad);
    }
    if let Some((z, stats)) = &record.pre_norm {
        grad = instance_norm_backward(
            z,
            stats,
            &layer.norm_scale,
            &grad,
            &mut grad_layer.norm_scale,
            &mut grad_layer.norm_shift,
        );
    }
    conv3d_backward_padded(
        &record.input,
        layer,
        &grad,
        padding,
        &mut grad_layer.kernel,
        &mut grad_layer.bias,
    )
}

fn add_into<R: Real>(dst: &mut FeatureVolume<R>, src: &FeatureVolume<R>) {
    for (a, &b) in dst.data.iter_mut().zip(&src.data) {
        *a += b;
    }
}

/// Parameter gradients and the gradient with respect to the input features.
pub fn unet_backward<R: Real>(
    tape: &Tape<R>,
    grad_output: &FeatureVolume<R>,
    params: &NetworkParams<R>,
) -> Result<(NetworkParams<R>, FeatureVolume<R>)> {
    let mut grads = params.zeros_like();
    let g = unet_backward_into(tape, grad_output, params, &mut grads)?;
    Ok((grads, g))
}

/// Like [`unet_backward`] but adds the parameter gradients into `grads`.
pub fn unet_backward_into<R: Real>(
    tape: &Tape<R>,
    grad_output: &FeatureVolume<R>,
    params: &NetworkParams<R>,
    grads: &mut NetworkParams<R>,
) -> Result<FeatureVolume<R>> {
    if tape.records.len() != LAYERS.len() {
        return Err(domain!("tape holds {} layers, expected {}", tape.records.len(), LAYERS.len()));
    }
    let out = &tape.records[LAYERS.len() - 1].output;
    if grad_output.channels != out.channels || grad_output.dims != out.dims {
        return Err(domain!(
            "output gradient is {} x {}, the tape expects {} x {}",
            grad_output.channels,
            grad_output.dims,
            out.channels,
            out.dims
        ));
    }
    params.validate()?;
    grads.validate()?;
    let p = tape.padding;
    let r = &tape.records;
    let l = &params.layers;
    let gl = &mut grads.layers;
    let mut g = grad_output.clone();
    for i in [16, 15, 14] {
        g = layer_backward(&r[i], &l[i], &mut gl[i], g, p)?;
    }
    let (mut g_skip1, g_up1) = split_channels(&g, LAYERS[1].c_out);
    g = trilinear_upsample2x_adjoint(&g_up1, r[13].output.dims, p);
    for i in [13, 12, 11] {
        g = layer_backward(&r[i], &l[i], &mut gl[i], g, p)?;
    }
    let (mut g_skip2, g_up2) = split_channels(&g, LAYERS[4].c_out);
    g = trilinear_upsample2x_adjoint(&g_up2, r[10].output.dims, p);
    for i in (5..=10).rev() {
        g = layer_backward(&r[i], &l[i], &mut gl[i], g, p)?;
    }
    add_into(&mut g_skip2, &g);
    g = g_skip2;
    for i in [4, 3, 2] {
        g = layer_backward(&r[i], &l[i], &mut gl[i], g, p)?;
    }
    add_into(&mut g_skip1, &g);
    g = g_skip1;
    for i in [1, 0] {
        g = layer_backward(&r[i], &l[i], &mut gl[i], g, p)?;
    }
    Ok(g)
}
