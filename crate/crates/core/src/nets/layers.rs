//! Trainable layers with explicit forward and backward passes.
//!
//! `infer` is a pure function of parameters and input (normalization uses
//! running statistics). `forward` runs in training mode, caches what the
//! backward pass needs and updates normalization running statistics;
//! `backward` consumes that cache, accumulates parameter gradients into the
//! store and returns the gradient with respect to the layer input.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

use super::ops;
use super::params::{Builder, ParamId, ParamStore};

/// Receptive-field bookkeeping: `size` in input pixels, `jump` = input pixels per feature pixel.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Field {
    pub size: f64,
    pub jump: f64,
}

impl Field {
    pub const PIXEL: Field = Field {
        size: 1.0,
        jump: 1.0,
    };

    pub fn conv(self, kernel: usize, stride: usize) -> Field {
        Field {
            size: self.size + (kernel as f64 - 1.0) * self.jump,
            jump: self.jump * stride as f64,
        }
    }

    /// Upsampling by `factor` where each output reads `taps` neighbouring inputs per axis.
    pub fn upsample(self, factor: usize, taps: usize) -> Field {
        Field {
            size: self.size + (taps as f64 - 1.0) * self.jump,
            jump: self.jump / factor as f64,
        }
    }

    pub fn union(self, other: Field) -> Field {
        Field {
            size: self.size.max(other.size),
            jump: self.jump.min(other.jump),
        }
    }
}

pub trait Layer<T: Float>: Send + Sync {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>>;
    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>>;
    fn field(&self, input: Field) -> Field;
}

fn missing_cache() -> Error {
    Error::Shape("backward called without a preceding training forward".into())
}

pub struct Conv2d<T> {
    weight: ParamId,
    bias: Option<ParamId>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Float> Conv2d<T> {
    /// Square-kernel convolution with "same" padding (`kernel / 2`).
    pub fn build(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        b.scoped(name, |b| {
            let weight = b.fan_in_uniform(
                "weight",
                vec![out_channels, in_channels, kernel, kernel],
                in_channels * kernel * kernel,
            );
            let bias = bias.then(|| b.constant("bias", vec![out_channels], 0.0, true));
            Conv2d {
                weight,
                bias,
                in_channels,
                out_channels,
                kernel,
                stride,
                pad: kernel / 2,
                input: None,
            }
        })
    }

    pub fn with_padding(mut self, pad: usize) -> Self {
        self.pad = pad;
        self
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> Option<ParamId> {
        self.bias
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {}",
                self.in_channels,
                x.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Float> Layer<T> for Conv2d<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let l = self;
        ops::conv2d(
            x,
            p.value(l.weight),
            l.bias.map(|b| p.value(b)),
            l.out_channels,
            l.kernel,
            l.stride,
            l.pad,
        )
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(p, x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        let l = &*self;
        let mut dw = p.take_grad(l.weight);
        let mut db = l.bias.map(|b| p.take_grad(b));
        let dx = ops::conv2d_backward(
            &x,
            p.value(l.weight),
            grad,
            l.kernel,
            l.stride,
            l.pad,
            &mut dw,
            db.as_deref_mut(),
        );
        p.restore_grad(l.weight, dw);
        if let (Some(b), Some(db)) = (l.bias, db) {
            p.restore_grad(b, db);
        }
        dx
    }

    fn field(&self, input: Field) -> Field {
        input.conv(self.kernel, self.stride)
    }
}

/// Transposed convolution (PyTorch weight layout `in × out × k × k`).
pub struct ConvTranspose2d<T> {
    weight: ParamId,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Option<Tensor<T>>,
}

impl<T: Float> ConvTranspose2d<T> {
    pub fn build(
        b: &mut Builder<'_, T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let weight = b.fan_in_uniform(
                "weight",
                vec![in_channels, out_channels, kernel, kernel],
                (in_channels * kernel * kernel / (stride * stride).max(1)).max(1),
            );
            ConvTranspose2d {
                weight,
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
                input: None,
            }
        })
    }
}

impl<T: Float> Layer<T> for ConvTranspose2d<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.in_channels {
            return Err(Error::Shape("transposed conv channel mismatch".into()));
        }
        ops::conv_transpose2d(
            x,
            p.value(self.weight),
            self.out_channels,
            self.kernel,
            self.stride,
            self.pad,
        )
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(p, x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        let mut dw = p.take_grad(self.weight);
        let dx = ops::conv_transpose2d_backward(
            &x,
            p.value(self.weight),
            grad,
            self.kernel,
            self.stride,
            self.pad,
            &mut dw,
        );
        p.restore_grad(self.weight, dw);
        dx
    }

    fn field(&self, input: Field) -> Field {
        input.upsample(self.stride, self.kernel.div_ceil(self.stride))
    }
}

/// 3×3 (or k×k) per-channel convolution without bias.
pub struct DepthwiseConv2d<T> {
    weight: ParamId,
    channels: usize,
    kernel: usize,
    stride: usize,
    input: Option<Tensor<T>>,
}

impl<T: Float> DepthwiseConv2d<T> {
    pub fn build(
        b: &mut Builder<'_, T>,
        name: &str,
        channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        b.scoped(name, |b| {
            let weight =
                b.fan_in_uniform("weight", vec![channels, 1, kernel, kernel], kernel * kernel);
            DepthwiseConv2d {
                weight,
                channels,
                kernel,
                stride,
                input: None,
            }
        })
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }
}

impl<T: Float> Layer<T> for DepthwiseConv2d<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "depthwise conv expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        ops::depthwise_conv2d(
            x,
            p.value(self.weight),
            self.kernel,
            self.stride,
            self.kernel / 2,
        )
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = self.infer(p, x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(missing_cache)?;
        let mut dw = p.take_grad(self.weight);
        let dx = ops::depthwise_conv2d_backward(
            &x,
            p.value(self.weight),
            grad,
            self.kernel,
            self.stride,
            self.kernel / 2,
            &mut dw,
        );
        p.restore_grad(self.weight, dw);
        dx
    }

    fn field(&self, input: Field) -> Field {
        input.conv(self.kernel, self.stride)
    }
}

/// Per-channel batch normalization.
pub struct BatchNorm2d<T> {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    channels: usize,
    momentum: f64,
    eps: f64,
    cache: Option<(Tensor<T>, Vec<T>)>,
}

impl<T: Float> BatchNorm2d<T> {
    pub fn build(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Self {
        b.scoped(name, |b| BatchNorm2d {
            gamma: b.constant("weight", vec![channels], 1.0, true),
            beta: b.constant("bias", vec![channels], 0.0, true),
            running_mean: b.constant("running_mean", vec![channels], 0.0, false),
            running_var: b.constant("running_var", vec![channels], 1.0, false),
            channels,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        })
    }

    pub fn gamma_id(&self) -> ParamId {
        self.gamma
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.channels {
            return Err(Error::Shape(format!(
                "batch norm expects {} channels, got {}",
                self.channels,
                x.channels()
            )));
        }
        Ok(())
    }
}

impl<T: Float> Layer<T> for BatchNorm2d<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let (g, b) = (p.value(self.gamma), p.value(self.beta));
        let (m, v) = (p.value(self.running_mean), p.value(self.running_var));
        let mut y = x.clone();
        for s in 0..x.batch() {
            for c in 0..self.channels {
                let scale = g[c] / (v[c] + T::of(self.eps)).sqrt();
                let shift = b[c] - m[c] * scale;
                y.plane_mut(s, c)
                    .iter_mut()
                    .for_each(|e| *e = *e * scale + shift);
            }
        }
        Ok(y)
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let count = (x.batch() * x.plane_len()) as f64;
        let mut means = vec![0.0f64; self.channels];
        let mut vars = vec![0.0f64; self.channels];
        for c in 0..self.channels {
            let mut sum = 0.0f64;
            for s in 0..x.batch() {
                sum += x.plane(s, c).iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0f64;
            for s in 0..x.batch() {
                sq += x
                    .plane(s, c)
                    .iter()
                    .map(|v| {
                        let d = v.as_f64() - mean;
                        d * d
                    })
                    .sum::<f64>();
            }
            means[c] = mean;
            vars[c] = sq / count;
        }
        let inv_std: Vec<T> = vars
            .iter()
            .map(|v| T::of(1.0 / (v + self.eps).sqrt()))
            .collect();
        let mut xhat = x.clone();
        for s in 0..x.batch() {
            for c in 0..self.channels {
                let m = T::of(means[c]);
                let is = inv_std[c];
                xhat.plane_mut(s, c)
                    .iter_mut()
                    .for_each(|e| *e = (*e - m) * is);
            }
        }
        let (g, b) = (p.value(self.gamma).to_vec(), p.value(self.beta).to_vec());
        let mut y = xhat.clone();
        for s in 0..x.batch() {
            for c in 0..self.channels {
                y.plane_mut(s, c)
                    .iter_mut()
                    .for_each(|e| *e = *e * g[c] + b[c]);
            }
        }
        let mom = self.momentum;
        let unbias = if count > 1.0 {
            count / (count - 1.0)
        } else {
            1.0
        };
        for (c, rm) in p.value_mut(self.running_mean).iter_mut().enumerate() {
            *rm = T::of((1.0 - mom) * rm.as_f64() + mom * means[c]);
        }
        for (c, rv) in p.value_mut(self.running_var).iter_mut().enumerate() {
            *rv = T::of((1.0 - mom) * rv.as_f64() + mom * vars[c] * unbias);
        }
        self.cache = Some((xhat, inv_std));
        Ok(y)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (xhat, inv_std) = self.cache.take().ok_or_else(missing_cache)?;
        xhat.check_same(grad)?;
        let count = (grad.batch() * grad.plane_len()) as f64;
        let gamma = p.value(self.gamma).to_vec();
        let mut dgamma = vec![0.0f64; self.channels];
        let mut dbeta = vec![0.0f64; self.channels];
        for s in 0..grad.batch() {
            for c in 0..self.channels {
                for (&g, &xh) in grad.plane(s, c).iter().zip(xhat.plane(s, c)) {
                    dbeta[c] += g.as_f64();
                    dgamma[c] += (g * xh).as_f64();
                }
            }
        }
        let mut dx = Tensor::zeros(grad.shape());
        for c in 0..self.channels {
            let k = gamma[c] * inv_std[c] / T::of(count);
            let sum_g = T::of(dbeta[c]);
            let sum_gx = T::of(dgamma[c]);
            let n = T::of(count);
            for s in 0..grad.batch() {
                let gp = grad.plane(s, c);
                let xp = xhat.plane(s, c);
                for ((d, &g), &xh) in dx.plane_mut(s, c).iter_mut().zip(gp).zip(xp) {
                    *d = k * (n * g - sum_g - xh * sum_gx);
                }
            }
        }
        for (d, v) in p.grad_mut(self.gamma).iter_mut().zip(&dgamma) {
            *d += T::of(*v);
        }
        for (d, v) in p.grad_mut(self.beta).iter_mut().zip(&dbeta) {
            *d += T::of(*v);
        }
        Ok(dx)
    }

    fn field(&self, input: Field) -> Field {
        input
    }
}

#[derive(Default)]
pub struct Relu<T> {
    output: Option<Tensor<T>>,
}

impl<T: Float> Relu<T> {
    pub fn new() -> Self {
        Relu { output: None }
    }
}

pub(crate) fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub(crate) fn relu_backward<T: Float>(out: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut dx = grad.clone();
    for (d, &o) in dx.data_mut().iter_mut().zip(out.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    dx
}

impl<T: Float> Layer<T> for Relu<T> {
    fn infer(&self, _p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(relu(x))
    }

    fn forward(&mut self, _p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = relu(x);
        self.output = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, _p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.output.take().ok_or_else(missing_cache)?;
        out.check_same(grad)?;
        Ok(relu_backward(&out, grad))
    }

    fn field(&self, input: Field) -> Field {
        input
    }
}

pub struct MaxPool2d {
    kernel: usize,
    stride: usize,
    pad: usize,
    cache: Option<(Vec<u32>, [usize; 4])>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }
}

impl<T: Float> Layer<T> for MaxPool2d {
    fn infer(&self, _p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::max_pool2d(x, self.kernel, self.stride, self.pad)?.0)
    }

    fn forward(&mut self, _p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (y, arg) = ops::max_pool2d(x, self.kernel, self.stride, self.pad)?;
        self.cache = Some((arg, x.shape()));
        Ok(y)
    }

    fn backward(&mut self, _p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (arg, shape) = self.cache.take().ok_or_else(missing_cache)?;
        Ok(ops::max_pool2d_backward(grad, &arg, shape))
    }

    fn field(&self, input: Field) -> Field {
        input.conv(self.kernel, self.stride)
    }
}

/// Parameter-free sub-pixel upscaling.
pub struct PixelShuffle {
    factor: usize,
}

impl PixelShuffle {
    pub fn new(factor: usize) -> Self {
        PixelShuffle { factor }
    }
}

impl<T: Float> Layer<T> for PixelShuffle {
    fn infer(&self, _p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::pixel_shuffle(x, self.factor)
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer(p, x)
    }

    fn backward(&mut self, _p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        ops::pixel_unshuffle(grad, self.factor)
    }

    fn field(&self, input: Field) -> Field {
        input.upsample(self.factor, 1)
    }
}

/// Bilinear ×factor upsampling (half-pixel centers).
pub struct UpsampleBilinear {
    factor: usize,
    in_shape: Option<[usize; 4]>,
}

impl UpsampleBilinear {
    pub fn new(factor: usize) -> Self {
        UpsampleBilinear {
            factor,
            in_shape: None,
        }
    }
}

impl<T: Float> Layer<T> for UpsampleBilinear {
    fn infer(&self, _p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::resize_bilinear(x, x.height() * self.factor, x.width() * self.factor)
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.in_shape = Some(x.shape());
        self.infer(p, x)
    }

    fn backward(&mut self, _p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.in_shape.take().ok_or_else(missing_cache)?;
        ops::resize_bilinear_backward(grad, shape)
    }

    fn field(&self, input: Field) -> Field {
        input.upsample(self.factor, 2)
    }
}

/// Ordered composition of layers.
#[derive(Default)]
pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Float> Sequential<T> {
    pub fn new() -> Self {
        Sequential { layers: Vec::new() }
    }

    pub fn push(&mut self, layer: impl Layer<T> + 'static) -> &mut Self {
        self.layers.push(Box::new(layer));
        self
    }

    pub fn with(mut self, layer: impl Layer<T> + 'static) -> Self {
        self.push(layer);
        self
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

impl<T: Float> Layer<T> for Sequential<T> {
    fn infer(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(p, &cur)?;
        }
        Ok(cur)
    }

    fn forward(&mut self, p: &mut ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(p, &cur)?;
        }
        Ok(cur)
    }

    fn backward(&mut self, p: &mut ParamStore<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(p, &g)?;
        }
        Ok(g)
    }

    fn field(&self, input: Field) -> Field {
        self.layers.iter().fold(input, |f, l| l.field(f))
    }
}
