//! Weight initialisation and randomised parameter sets for tests.

use rand::Rng;

use crate::nn::conv::{BatchNormParams, ConvSpec};
use crate::nn::layers::ActivationKind;
use crate::nn::tensor::Tensor;
use crate::reparam::RepConvBlock;

/// Uniform in `±1/√fan_in`, zero bias, padding `k/2`.
pub fn conv_uniform(rng: &mut impl Rng, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> ConvSpec {
    let bound = 1.0 / ((in_ch * k * k) as f32).sqrt();
    let weight = Tensor::from_fn([out_ch, in_ch, k, k], |_| rng.random_range(-bound..bound));
    let mut spec = ConvSpec::zeros(in_ch, out_ch, k, stride);
    spec.weight = weight;
    spec
}

/// Batch-norm with non-trivial statistics, so folding is actually exercised.
pub fn random_bn(rng: &mut impl Rng, channels: usize) -> BatchNormParams {
    let mut v = |lo: f32, hi: f32| -> Vec<f32> { (0..channels).map(|_| rng.random_range(lo..hi)).collect() };
    BatchNormParams {
        gamma: v(0.5, 1.5),
        beta: v(-0.3, 0.3),
        running_mean: v(-0.5, 0.5),
        running_var: v(0.3, 2.0),
        eps: BatchNormParams::DEFAULT_EPS,
    }
}

pub fn random_vec(rng: &mut impl Rng, len: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn random_tensor(rng: &mut impl Rng, shape: [usize; 4], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// RepConv block with random weights and batch-norm statistics on every
/// branch. The identity branch is added whenever the shapes allow it.
pub fn random_repconv(rng: &mut impl Rng, in_ch: usize, out_ch: usize, stride: usize) -> RepConvBlock {
    let mut branch = |k: usize| {
        let mut spec = conv_uniform(rng, in_ch, out_ch, k, stride);
        spec.bias = random_vec(rng, out_ch, -0.2, 0.2);
        let bn = random_bn(rng, out_ch);
        spec.with_bn(bn)
    };
    let branch3x3 = branch(3);
    let branch1x1 = branch(1);
    let identity_bn = (in_ch == out_ch && stride == 1).then(|| random_bn(rng, out_ch));
    RepConvBlock { branch3x3, branch1x1, identity_bn, activation: ActivationKind::Silu }
}
