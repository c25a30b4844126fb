//! Lossless model reduction: batch-norm folding, RepConv branch fusion,
//! implicit-layer folding and merging of parallel output convolutions.
//!
//! Fusion runs in a fixed order (bn fold, RepConv fuse, implicit folds,
//! merge); each step requires the output form of the previous one.

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d, BatchNormParams, ConvSpec};
use crate::nn::layers::{activation, join, ActivationKind, RepConvLayer, StateDict};
use crate::nn::tensor::Shape;
use crate::nn::tensor::Tensor;

/// Training-time multi-branch block.
#[derive(Clone, Debug, PartialEq)]
pub struct RepConvBlock {
    /// 3×3 convolution with batch-norm, padding 1.
    pub branch3x3: ConvSpec,
    /// 1×1 convolution with batch-norm, padding 0.
    pub branch1x1: ConvSpec,
    /// Present only when `in_ch == out_ch` and stride is 1.
    pub identity_bn: Option<BatchNormParams>,
    pub activation: ActivationKind,
}

impl RepConvBlock {
    pub fn in_channels(&self) -> usize {
        self.branch3x3.in_channels()
    }
    pub fn out_channels(&self) -> usize {
        self.branch3x3.out_channels()
    }
    pub fn stride(&self) -> usize {
        self.branch3x3.stride
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = (&self.branch3x3, &self.branch1x1);
        a.validate()?;
        b.validate()?;
        if a.kernel() != 3 || a.padding != 1 || b.kernel() != 1 || b.padding != 0 {
            return Err(Error::invalid("RepConvBlock", "expects a 3x3/pad-1 and a 1x1/pad-0 branch"));
        }
        if a.in_channels() != b.in_channels() || a.out_channels() != b.out_channels() || a.stride != b.stride {
            return Err(Error::shape(
                "RepConvBlock",
                format!(
                    "branches differ: 3x3 {}->{} s{} vs 1x1 {}->{} s{}",
                    a.in_channels(),
                    a.out_channels(),
                    a.stride,
                    b.in_channels(),
                    b.out_channels(),
                    b.stride
                ),
            ));
        }
        if a.implicit_add.is_some() || a.implicit_mul.is_some() || b.implicit_add.is_some() || b.implicit_mul.is_some()
        {
            return Err(Error::invalid("RepConvBlock", "branches carry no implicit layers"));
        }
        if let Some(bn) = &self.identity_bn {
            bn.validate()?;
            if a.in_channels() != a.out_channels() || a.stride != 1 || bn.channels() != a.out_channels() {
                return Err(Error::shape("RepConvBlock", "identity branch needs in == out channels and stride 1"));
            }
        }
        Ok(())
    }

    /// Multi-branch forward before the activation.
    pub fn forward_pre_activation(&self, x: &Tensor) -> Result<Tensor> {
        self.validate()?;
        let mut sum = conv2d(x, &self.branch3x3)?.add(&conv2d(x, &self.branch1x1)?)?;
        if let Some(bn) = &self.identity_bn {
            let mut id = x.clone();
            bn.apply(&mut id)?;
            sum = sum.add(&id)?;
        }
        Ok(sum)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(activation(&self.forward_pre_activation(x)?, self.activation))
    }

    pub fn param_count(&self) -> usize {
        self.branch3x3.param_count()
            + self.branch1x1.param_count()
            + self.identity_bn.as_ref().map_or(0, |bn| 2 * bn.channels())
    }
}

impl StateDict for RepConvBlock {
    fn visit_state(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Shape, &mut [f32])) {
        self.branch3x3.visit_state(&join(prefix, "rbr_3x3"), f);
        self.branch1x1.visit_state(&join(prefix, "rbr_1x1"), f);
        if let Some(bn) = &mut self.identity_bn {
            bn.visit_state(&join(prefix, "rbr_identity"), f);
        }
    }
}

impl RepConvLayer {
    /// Snapshot of the current weights and running statistics.
    pub fn to_block(&self) -> RepConvBlock {
        RepConvBlock {
            branch3x3: self.branch3x3.to_spec(),
            branch1x1: self.branch1x1.to_spec(),
            identity_bn: self.identity.as_ref().map(|b| b.params.clone()),
            activation: self.act,
        }
    }
}

/// `W' = W·γ/√(var+eps)`, `b' = β + (b − mean)·γ/√(var+eps)`.
pub fn fold_bn(spec: &ConvSpec) -> Result<ConvSpec> {
    let bn = spec.bn.as_ref().ok_or_else(|| Error::NotFoldable("spec has no batch-norm".into()))?;
    spec.validate()?;
    let (scale, _) = bn.affine();
    let mut out = spec.clone();
    out.bn = None;
    let per_out = spec.weight.len() / spec.out_channels();
    for (o, chunk) in out.weight.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|w| *w *= scale[o]);
    }
    for o in 0..spec.out_channels() {
        out.bias[o] = bn.beta[o] + (spec.bias[o] - bn.running_mean[o]) * scale[o];
    }
    Ok(out)
}

/// Collapses the three branches into one bn-free 3×3 convolution equal to
/// the block's pre-activation output.
pub fn fuse_repconv(block: &RepConvBlock) -> Result<ConvSpec> {
    block.validate()?;
    let (in_c, out_c) = (block.in_channels(), block.out_channels());
    let mut fused = fold_branch(&block.branch3x3)?;
    let one = fold_branch(&block.branch1x1)?;
    for o in 0..out_c {
        for i in 0..in_c {
            let idx = fused.weight.index([o, i, 1, 1]);
            fused.weight.data_mut()[idx] += one.weight.at([o, i, 0, 0]);
        }
        fused.bias[o] += one.bias[o];
    }
    if let Some(bn) = &block.identity_bn {
        let mut id = ConvSpec::zeros(in_c, out_c, 3, 1);
        for c in 0..out_c {
            let idx = id.weight.index([c, c, 1, 1]);
            id.weight.data_mut()[idx] = 1.0;
        }
        let id = fold_bn(&id.with_bn(bn.clone()))?;
        for (w, v) in fused.weight.data_mut().iter_mut().zip(id.weight.data()) {
            *w += v;
        }
        for (b, v) in fused.bias.iter_mut().zip(&id.bias) {
            *b += v;
        }
    }
    fused.stride = block.stride();
    fused.padding = 1;
    Ok(fused)
}

fn fold_branch(spec: &ConvSpec) -> Result<ConvSpec> {
    if spec.bn.is_some() {
        fold_bn(spec)
    } else {
        Ok(spec.clone())
    }
}

/// Folds a channel-wise input shift into the bias of a 1×1 convolution:
/// `b'_o = b_o + Σ_i W[o,i]·a_i`. Exact only without spatial padding
/// effects, hence restricted to 1×1 kernels.
pub fn fold_implicit_add(spec: &ConvSpec) -> Result<ConvSpec> {
    let add = spec.implicit_add.as_ref().ok_or_else(|| Error::NotFoldable("no implicit_add".into()))?;
    spec.validate()?;
    if spec.kernel() != 1 {
        return Err(Error::NotFoldable(format!(
            "implicit_add folds exactly only into 1x1 kernels (got {0}x{0})",
            spec.kernel()
        )));
    }
    let mut out = spec.clone();
    out.implicit_add = None;
    let in_c = spec.in_channels();
    for o in 0..spec.out_channels() {
        let row = &spec.weight.data()[o * in_c..(o + 1) * in_c];
        let shift: f64 = row.iter().zip(add).map(|(&w, &a)| w as f64 * a as f64).sum();
        out.bias[o] = (spec.bias[o] as f64 + shift) as f32;
    }
    Ok(out)
}

/// Folds a channel-wise output scale into weights and bias.
pub fn fold_implicit_mul(spec: &ConvSpec) -> Result<ConvSpec> {
    let mul = spec.implicit_mul.as_ref().ok_or_else(|| Error::NotFoldable("no implicit_mul".into()))?;
    spec.validate()?;
    if spec.bn.is_some() {
        return Err(Error::NotFoldable("fold batch-norm before implicit_mul".into()));
    }
    let mut out = spec.clone();
    out.implicit_mul = None;
    let per_out = spec.weight.len() / spec.out_channels();
    for (o, chunk) in out.weight.data_mut().chunks_mut(per_out).enumerate() {
        chunk.iter_mut().for_each(|w| *w *= mul[o]);
    }
    out.bias.iter_mut().zip(mul).for_each(|(b, m)| *b *= m);
    Ok(out)
}

/// Folds whatever optional layers `spec` carries, in the fixed order.
pub fn fold_all(spec: &ConvSpec) -> Result<ConvSpec> {
    let mut s = spec.clone();
    if s.bn.is_some() {
        s = fold_bn(&s)?;
    }
    if s.implicit_add.is_some() {
        s = fold_implicit_add(&s)?;
    }
    if s.implicit_mul.is_some() {
        s = fold_implicit_mul(&s)?;
    }
    Ok(s)
}

/// Stacks two plain convolutions over the same input into one whose output
/// channels are `reg` followed by `obj`.
pub fn merge_parallel_convs(reg: &ConvSpec, obj: &ConvSpec) -> Result<ConvSpec> {
    reg.validate()?;
    obj.validate()?;
    if !reg.is_plain() || !obj.is_plain() {
        return Err(Error::NotFoldable("fold bn and implicit layers before merging".into()));
    }
    if reg.in_channels() != obj.in_channels()
        || reg.kernel() != obj.kernel()
        || reg.stride != obj.stride
        || reg.padding != obj.padding
    {
        return Err(Error::shape(
            "merge_parallel_convs",
            format!(
                "geometry differs: {:?} s{} p{} vs {:?} s{} p{}",
                reg.weight.shape(),
                reg.stride,
                reg.padding,
                obj.weight.shape(),
                obj.stride,
                obj.padding
            ),
        ));
    }
    let [ro, i, k, _] = reg.weight.shape();
    let oo = obj.out_channels();
    let mut data = reg.weight.data().to_vec();
    data.extend_from_slice(obj.weight.data());
    let mut bias = reg.bias.clone();
    bias.extend_from_slice(&obj.bias);
    ConvSpec::new(Tensor::new([ro + oo, i, k, k], data)?, bias, reg.stride, reg.padding)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bn(gamma: f32, beta: f32, mean: f32, var: f32, eps: f32) -> BatchNormParams {
        BatchNormParams { gamma: vec![gamma], beta: vec![beta], running_mean: vec![mean], running_var: vec![var], eps }
    }

    #[test]
    fn identity_bn_fold_is_noop() {
        let spec = ConvSpec::new(Tensor::vector(vec![0.7]).reshape([1, 1, 1, 1]).unwrap(), vec![0.2], 1, 0).unwrap();
        let folded = fold_bn(&spec.clone().with_bn(bn(1.0, 0.0, 0.0, 1.0, 0.0))).unwrap();
        assert_eq!(folded, spec);
    }

    #[test]
    fn closed_form_fold() {
        let spec = ConvSpec::new(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap(), vec![0.5], 1, 0)
            .unwrap()
            .with_bn(bn(2.0, 0.0, 0.0, 1.0, 0.0));
        let f = fold_bn(&spec).unwrap();
        assert_eq!(f.weight.data(), &[2.0]);
        assert_eq!(f.bias, vec![1.0]);
    }

    #[test]
    fn missing_bn_is_an_error() {
        assert!(matches!(fold_bn(&ConvSpec::zeros(1, 1, 1, 1)), Err(Error::NotFoldable(_))));
    }

    #[test]
    fn implicit_add_dot_product() {
        let mut spec = ConvSpec::new(Tensor::new([1, 2, 1, 1], vec![1.0, 1.0]).unwrap(), vec![0.0], 1, 0).unwrap();
        spec.implicit_add = Some(vec![0.5, 0.25]);
        let f = fold_implicit_add(&spec).unwrap();
        assert_eq!(f.bias, vec![0.75]);
        assert!(f.implicit_add.is_none());
    }

    #[test]
    fn implicit_add_on_3x3_rejected() {
        let mut spec = ConvSpec::zeros(2, 1, 3, 1);
        spec.implicit_add = Some(vec![0.5, 0.25]);
        assert!(matches!(fold_implicit_add(&spec), Err(Error::NotFoldable(_))));
    }

    #[test]
    fn zero_implicit_add_leaves_spec() {
        let mut spec = ConvSpec::new(Tensor::new([1, 2, 1, 1], vec![0.3, -2.0]).unwrap(), vec![0.1], 1, 0).unwrap();
        let plain = spec.clone();
        spec.implicit_add = Some(vec![0.0, 0.0]);
        assert_eq!(fold_implicit_add(&spec).unwrap(), plain);
    }

    #[test]
    fn implicit_mul_scaling() {
        let mut spec = ConvSpec::new(Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap(), vec![0.5], 1, 0).unwrap();
        spec.implicit_mul = Some(vec![2.0]);
        let f = fold_implicit_mul(&spec).unwrap();
        assert_eq!(f.weight.data(), &[2.0]);
        assert_eq!(f.bias, vec![1.0]);
        spec.implicit_mul = Some(vec![1.0]);
        let mut plain = spec.clone();
        plain.implicit_mul = None;
        assert_eq!(fold_implicit_mul(&spec).unwrap(), plain);
    }

    #[test]
    fn merge_rejects_mismatched_geometry() {
        let a = ConvSpec::zeros(4, 4, 1, 1);
        let b = ConvSpec::zeros(4, 1, 3, 1);
        assert!(merge_parallel_convs(&a, &b).is_err());
        let c = ConvSpec::zeros(3, 1, 1, 1);
        assert!(merge_parallel_convs(&a, &c).is_err());
    }

    #[test]
    fn merge_with_zero_obj_weights_yields_bias() {
        let mut reg = ConvSpec::zeros(3, 4, 1, 1);
        reg.weight.data_mut().iter_mut().for_each(|w| *w = 0.5);
        let mut obj = ConvSpec::zeros(3, 1, 1, 1);
        obj.bias = vec![-1.25];
        let merged = merge_parallel_convs(&reg, &obj).unwrap();
        assert_eq!(merged.out_channels(), 5);
        let x = Tensor::from_fn([1, 3, 2, 2], |[_, c, y, x]| (c + y + x) as f32);
        let y = conv2d(&x, &merged).unwrap();
        for yy in 0..2 {
            for xx in 0..2 {
                assert_eq!(y.at([0, 4, yy, xx]), -1.25);
            }
        }
    }

    #[test]
    fn mismatched_branches_rejected() {
        let block = RepConvBlock {
            branch3x3: ConvSpec::zeros(2, 2, 3, 1).with_bn(BatchNormParams::identity(2)),
            branch1x1: {
                let mut s = ConvSpec::zeros(2, 3, 1, 1).with_bn(BatchNormParams::identity(3));
                s.padding = 0;
                s
            },
            identity_bn: None,
            activation: ActivationKind::Silu,
        };
        assert!(fuse_repconv(&block).is_err());
    }
}
