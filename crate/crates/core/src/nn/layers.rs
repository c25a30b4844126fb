//! Trainable layers. Each layer records what its backward pass needs during
//! `forward`; `backward` consumes that record, so a second `backward` without a
//! fresh forward pass is an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::{add_channels, conv_raw, conv_raw_backward, scale_shift_channels, BatchNormParams, ConvSpec};
use crate::nn::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm, caches recorded for backward.
    Train,
    /// Running statistics; caches are still recorded so gradients can be checked.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Silu,
    Sigmoid,
    Identity,
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn act_scalar(kind: ActivationKind, x: f32) -> f32 {
    match kind {
        ActivationKind::Silu => x * sigmoid(x),
        ActivationKind::Sigmoid => sigmoid(x),
        ActivationKind::Identity => x,
    }
}

#[inline]
fn act_derivative(kind: ActivationKind, x: f32) -> f32 {
    match kind {
        ActivationKind::Silu => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        ActivationKind::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        ActivationKind::Identity => 1.0,
    }
}

/// Elementwise activation.
pub fn activation(x: &Tensor, kind: ActivationKind) -> Tensor {
    if kind == ActivationKind::Identity {
        return x.clone();
    }
    x.map(|v| act_scalar(kind, v))
}

/// Gradient w.r.t. the pre-activation input `x`.
pub fn activation_backward(x: &Tensor, grad: &Tensor, kind: ActivationKind) -> Result<Tensor> {
    x.zip_map(grad, |v, g| g * act_derivative(kind, v))
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let s = &src[plane * h * w..(plane + 1) * h * w];
        let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        for y in 0..2 * h {
            let srow = &s[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut d[y * 2 * w..(y + 1) * 2 * w];
            for (x, v) in drow.iter_mut().enumerate() {
                *v = srow[x / 2];
            }
        }
    }
    out
}

/// Gradient of [`upsample2x`]: each source cell sums its four copies.
pub fn upsample2x_backward(grad: &Tensor) -> Result<Tensor> {
    let [n, c, h2, w2] = grad.shape();
    if h2 % 2 != 0 || w2 % 2 != 0 {
        return Err(Error::shape("upsample2x_backward", format!("odd gradient dims {h2}x{w2}")));
    }
    let (h, w) = (h2 / 2, w2 / 2);
    let mut out = Tensor::zeros([n, c, h, w]);
    let g = grad.data();
    let d = out.data_mut();
    for plane in 0..n * c {
        for y in 0..h2 {
            for x in 0..w2 {
                d[plane * h * w + (y / 2) * w + x / 2] += g[plane * h2 * w2 + y * w2 + x];
            }
        }
    }
    Ok(out)
}

/// Elementwise product and its gradient `(grad·b, grad·a)`.
pub fn mul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((grad.mul(b)?, grad.mul(a)?))
}

/// Mutable view of one trainable parameter and its gradient accumulator.
pub struct ParamMut<'a> {
    pub name: String,
    pub shape: Shape,
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
}

/// Anything holding persistent tensors (parameters and running statistics).
pub trait StateDict {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32]));
}

/// Anything holding trainable parameters.
pub trait Module: StateDict {
    /// Trainable parameters with their gradient buffers.
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>));

    fn zero_grad(&mut self) {
        self.visit_params("", &mut |p| p.grad.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |p| n += p.value.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn vec_shape(len: usize) -> Shape {
    [len, 1, 1, 1]
}

struct BnCache {
    /// Normalized input x̂ (train mode) or the raw input (eval mode).
    xhat: Tensor,
    /// Per-channel 1/σ used in the forward pass.
    inv_std: Vec<f32>,
    train: bool,
}

/// Batch normalization over `(N, H, W)` per channel.
pub struct BatchNormLayer {
    pub params: BatchNormParams,
    pub momentum: f32,
    grad_gamma: Vec<f32>,
    grad_beta: Vec<f32>,
    cache: Option<BnCache>,
}

impl BatchNormLayer {
    pub const DEFAULT_MOMENTUM: f32 = 0.03;

    pub fn new(params: BatchNormParams) -> Self {
        let c = params.channels();
        Self {
            params,
            momentum: Self::DEFAULT_MOMENTUM,
            grad_gamma: vec![0.0; c],
            grad_beta: vec![0.0; c],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.params.channels();
        if x.channels() != c {
            return Err(Error::shape("batch_norm", format!("{} channels vs {c}", x.channels())));
        }
        match mode {
            Mode::Eval => {
                let mut y = x.clone();
                self.params.apply(&mut y)?;
                let inv_std = self.params.running_var.iter().map(|v| 1.0 / (v + self.params.eps).sqrt()).collect();
                self.cache = Some(BnCache { xhat: x.clone(), inv_std, train: false });
                Ok(y)
            }
            Mode::Train => {
                let (mean, var) = channel_moments(x);
                let m = (x.batch() * x.plane()) as f32;
                for ch in 0..c {
                    let unbiased = if m > 1.0 { var[ch] * m / (m - 1.0) } else { var[ch] };
                    let p = &mut self.params;
                    p.running_mean[ch] = (1.0 - self.momentum) * p.running_mean[ch] + self.momentum * mean[ch];
                    p.running_var[ch] = (1.0 - self.momentum) * p.running_var[ch] + self.momentum * unbiased;
                }
                let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + self.params.eps).sqrt()).collect();
                let shift: Vec<f32> = mean.iter().zip(&inv_std).map(|(m, s)| -m * s).collect();
                let mut xhat = x.clone();
                scale_shift_channels(&mut xhat, &inv_std, &shift);
                let mut y = xhat.clone();
                scale_shift_channels(&mut y, &self.params.gamma, &self.params.beta);
                self.cache = Some(BnCache { xhat, inv_std, train: true });
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| Error::NoForwardRecord { layer: "batch_norm".into() })?;
        grad.expect_same_shape(&cache.xhat, "batch_norm backward")?;
        let c = self.params.channels();
        let plane = grad.plane();
        let m = (grad.batch() * plane) as f64;
        let mut sum_g = vec![0.0f64; c];
        let mut sum_gx = vec![0.0f64; c];
        for (i, (gch, xch)) in grad.data().chunks(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
            let ch = i % c;
            for (&g, &xv) in gch.iter().zip(xch) {
                sum_g[ch] += g as f64;
                sum_gx[ch] += (g * xv) as f64;
            }
        }
        let mut dx = grad.clone();
        if cache.train {
            for ch in 0..c {
                self.grad_gamma[ch] += sum_gx[ch] as f32;
                self.grad_beta[ch] += sum_g[ch] as f32;
            }
            let gamma = &self.params.gamma;
            for (i, (dch, xch)) in dx.data_mut().chunks_mut(plane).zip(cache.xhat.data().chunks(plane)).enumerate() {
                let ch = i % c;
                let k = gamma[ch] * cache.inv_std[ch];
                let mean_g = (sum_g[ch] / m) as f32;
                let mean_gx = (sum_gx[ch] / m) as f32;
                for (d, &xv) in dch.iter_mut().zip(xch) {
                    *d = k * (*d - mean_g - xv * mean_gx);
                }
            }
        } else {
            // y = γ (x - μ) / σ + β with fixed statistics.
            for ch in 0..c {
                let mean = self.params.running_mean[ch] as f64;
                self.grad_gamma[ch] += ((sum_gx[ch] - mean * sum_g[ch]) * cache.inv_std[ch] as f64) as f32;
                self.grad_beta[ch] += sum_g[ch] as f32;
            }
            let scale: Vec<f32> = self.params.gamma.iter().zip(&cache.inv_std).map(|(g, s)| g * s).collect();
            scale_shift_channels(&mut dx, &scale, &vec![0.0; c]);
        }
        Ok(dx)
    }
}

impl Module for BatchNormLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        let c = self.params.channels();
        f(ParamMut {
            name: join(prefix, "gamma"),
            shape: vec_shape(c),
            value: &mut self.params.gamma,
            grad: &mut self.grad_gamma,
        });
        f(ParamMut {
            name: join(prefix, "beta"),
            shape: vec_shape(c),
            value: &mut self.params.beta,
            grad: &mut self.grad_beta,
        });
    }
}

impl StateDict for BatchNormLayer {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        self.params.visit_state(prefix, f);
    }
}

impl StateDict for BatchNormParams {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        let c = self.channels();
        f(&join(prefix, "gamma"), vec_shape(c), &mut self.gamma);
        f(&join(prefix, "beta"), vec_shape(c), &mut self.beta);
        f(&join(prefix, "running_mean"), vec_shape(c), &mut self.running_mean);
        f(&join(prefix, "running_var"), vec_shape(c), &mut self.running_var);
    }
}

/// Same names as the matching [`ConvLayer`], so a trained layer's checkpoint
/// loads into its inference spec.
impl StateDict for ConvSpec {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        let ws = self.weight.shape();
        f(&join(prefix, "weight"), ws, self.weight.data_mut());
        let o = self.bias.len();
        f(&join(prefix, "bias"), vec_shape(o), &mut self.bias);
        if let Some(bn) = &mut self.bn {
            bn.visit_state(&join(prefix, "bn"), f);
        }
        if let Some(a) = &mut self.implicit_add {
            f(&join(prefix, "implicit_add"), vec_shape(a.len()), a);
        }
        if let Some(m) = &mut self.implicit_mul {
            f(&join(prefix, "implicit_mul"), vec_shape(m.len()), m);
        }
    }
}

/// Per-channel mean and biased variance over `(N, H, W)`.
fn channel_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let c = x.channels();
    let plane = x.plane();
    let m = (x.batch() * plane) as f64;
    let mut sum = vec![0.0f64; c];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        sum[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mut sq = vec![0.0f64; c];
    for (i, chunk) in x.data().chunks(plane).enumerate() {
        let mu = mean[i % c];
        sq[i % c] += chunk.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
    }
    (mean.iter().map(|&v| v as f32).collect(), sq.iter().map(|s| (s / m) as f32).collect())
}

struct ConvCache {
    /// Input after the implicit-add shift.
    input: Tensor,
    /// Output of the normalization stage (before implicit-mul).
    normed: Option<Tensor>,
    /// Pre-activation output.
    pre_act: Tensor,
}

/// Convolution block: `act(implicit_mul * bn(W * (x + implicit_add) + b))`.
pub struct ConvLayer {
    pub spec: ConvSpec,
    pub act: ActivationKind,
    bn: Option<BatchNormLayer>,
    /// Skip the input gradient when nothing upstream needs it.
    pub need_input_grad: bool,
    grad_weight: Vec<f32>,
    grad_bias: Vec<f32>,
    grad_add: Vec<f32>,
    grad_mul: Vec<f32>,
    cache: Option<ConvCache>,
}

impl ConvLayer {
    pub fn new(mut spec: ConvSpec, act: ActivationKind) -> Result<Self> {
        spec.validate()?;
        let bn = spec.bn.take().map(BatchNormLayer::new);
        Ok(Self {
            grad_weight: vec![0.0; spec.weight.len()],
            grad_bias: vec![0.0; spec.bias.len()],
            grad_add: vec![0.0; spec.implicit_add.as_ref().map_or(0, Vec::len)],
            grad_mul: vec![0.0; spec.implicit_mul.as_ref().map_or(0, Vec::len)],
            spec,
            act,
            bn,
            need_input_grad: true,
            cache: None,
        })
    }

    /// The full spec, with current batch-norm statistics attached.
    pub fn to_spec(&self) -> ConvSpec {
        let mut s = self.spec.clone();
        s.bn = self.bn.as_ref().map(|b| b.params.clone());
        s
    }

    pub fn has_bn(&self) -> bool {
        self.bn.is_some()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut input = x.clone();
        if let Some(a) = &self.spec.implicit_add {
            if x.channels() != a.len() {
                return Err(Error::shape("conv2d", format!("{} channels vs implicit_add {}", x.channels(), a.len())));
            }
            add_channels(&mut input, a);
        }
        let mut y = conv_raw(&input, &self.spec.weight, &self.spec.bias, self.spec.stride, self.spec.padding)?;
        if let Some(bn) = &mut self.bn {
            y = bn.forward(&y, mode)?;
        }
        let normed = if let Some(m) = &self.spec.implicit_mul {
            let before = y.clone();
            scale_shift_channels(&mut y, m, &vec![0.0; m.len()]);
            Some(before)
        } else {
            None
        };
        let out = activation(&y, self.act);
        self.cache = Some(ConvCache { input, normed, pre_act: y });
        Ok(out)
    }

    /// Accumulates parameter gradients; returns the input gradient (zeros when
    /// `need_input_grad` is off).
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| Error::NoForwardRecord { layer: "conv".into() })?;
        let mut g = activation_backward(&cache.pre_act, grad, self.act)?;
        if let (Some(m), Some(normed)) = (&self.spec.implicit_mul, &cache.normed) {
            let plane = g.plane();
            let c = m.len();
            for (i, (gch, nch)) in g.data().chunks(plane).zip(normed.data().chunks(plane)).enumerate() {
                self.grad_mul[i % c] += gch.iter().zip(nch).map(|(a, b)| (a * b) as f64).sum::<f64>() as f32;
            }
            scale_shift_channels(&mut g, m, &vec![0.0; c]);
        }
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g)?;
        }
        let need_dx = self.need_input_grad || self.spec.implicit_add.is_some();
        let raw = conv_raw_backward(&cache.input, &self.spec.weight, self.spec.stride, self.spec.padding, &g, need_dx)?;
        self.grad_weight.iter_mut().zip(&raw.weight).for_each(|(a, b)| *a += b);
        self.grad_bias.iter_mut().zip(&raw.bias).for_each(|(a, b)| *a += b);
        let dx = match raw.input {
            Some(dx) => dx,
            None => return Ok(Tensor::zeros(cache.input.shape())),
        };
        if self.spec.implicit_add.is_some() {
            let plane = dx.plane();
            let c = self.grad_add.len();
            for (i, chunk) in dx.data().chunks(plane).enumerate() {
                self.grad_add[i % c] += chunk.iter().map(|&v| v as f64).sum::<f64>() as f32;
            }
        }
        Ok(dx)
    }
}

impl Module for ConvLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        let ws = self.spec.weight.shape();
        f(ParamMut {
            name: join(prefix, "weight"),
            shape: ws,
            value: self.spec.weight.data_mut(),
            grad: &mut self.grad_weight,
        });
        let o = self.spec.bias.len();
        f(ParamMut {
            name: join(prefix, "bias"),
            shape: vec_shape(o),
            value: &mut self.spec.bias,
            grad: &mut self.grad_bias,
        });
        if let Some(bn) = &mut self.bn {
            bn.visit_params(&join(prefix, "bn"), f);
        }
        if let Some(a) = &mut self.spec.implicit_add {
            f(ParamMut {
                name: join(prefix, "implicit_add"),
                shape: vec_shape(a.len()),
                value: a,
                grad: &mut self.grad_add,
            });
        }
        if let Some(m) = &mut self.spec.implicit_mul {
            f(ParamMut {
                name: join(prefix, "implicit_mul"),
                shape: vec_shape(m.len()),
                value: m,
                grad: &mut self.grad_mul,
            });
        }
    }
}

impl StateDict for ConvLayer {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        let ws = self.spec.weight.shape();
        f(&join(prefix, "weight"), ws, self.spec.weight.data_mut());
        let o = self.spec.bias.len();
        f(&join(prefix, "bias"), vec_shape(o), &mut self.spec.bias);
        if let Some(bn) = &mut self.bn {
            bn.visit_state(&join(prefix, "bn"), f);
        }
        if let Some(a) = &mut self.spec.implicit_add {
            f(&join(prefix, "implicit_add"), vec_shape(a.len()), a);
        }
        if let Some(m) = &mut self.spec.implicit_mul {
            f(&join(prefix, "implicit_mul"), vec_shape(m.len()), m);
        }
    }
}

/// Training-time RepConv: parallel 3×3+bn, 1×1+bn and (when shapes allow)
/// identity+bn branches, summed and activated.
pub struct RepConvLayer {
    pub branch3x3: ConvLayer,
    pub branch1x1: ConvLayer,
    pub identity: Option<BatchNormLayer>,
    pub act: ActivationKind,
    pre_act: Option<Tensor>,
}

impl RepConvLayer {
    pub fn new(
        branch3x3: ConvSpec,
        branch1x1: ConvSpec,
        identity: Option<BatchNormParams>,
        act: ActivationKind,
    ) -> Result<Self> {
        Ok(Self {
            branch3x3: ConvLayer::new(branch3x3, ActivationKind::Identity)?,
            branch1x1: ConvLayer::new(branch1x1, ActivationKind::Identity)?,
            identity: identity.map(BatchNormLayer::new),
            act,
            pre_act: None,
        })
    }

    pub fn set_need_input_grad(&mut self, need: bool) {
        self.branch3x3.need_input_grad = need;
        self.branch1x1.need_input_grad = need;
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut sum = self.branch3x3.forward(x, mode)?;
        sum = sum.add(&self.branch1x1.forward(x, mode)?)?;
        if let Some(id) = &mut self.identity {
            sum = sum.add(&id.forward(x, mode)?)?;
        }
        let out = activation(&sum, self.act);
        self.pre_act = Some(sum);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let pre = self.pre_act.take().ok_or_else(|| Error::NoForwardRecord { layer: "repconv".into() })?;
        let g = activation_backward(&pre, grad, self.act)?;
        let mut dx = self.branch3x3.backward(&g)?;
        dx = dx.add(&self.branch1x1.backward(&g)?)?;
        if let Some(id) = &mut self.identity {
            dx = dx.add(&id.backward(&g)?)?;
        }
        Ok(dx)
    }
}

impl Module for RepConvLayer {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.branch3x3.visit_params(&join(prefix, "rbr_3x3"), f);
        self.branch1x1.visit_params(&join(prefix, "rbr_1x1"), f);
        if let Some(id) = &mut self.identity {
            id.visit_params(&join(prefix, "rbr_identity"), f);
        }
    }
}

impl StateDict for RepConvLayer {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        self.branch3x3.visit_state(&join(prefix, "rbr_3x3"), f);
        self.branch1x1.visit_state(&join(prefix, "rbr_1x1"), f);
        if let Some(id) = &mut self.identity {
            id.visit_state(&join(prefix, "rbr_identity"), f);
        }
    }
}
