//! Direct nested-loop implementations kept as oracles for the fast kernels.

use crate::error::Result;
use crate::nn::conv::{out_dims, ConvSpec};
use crate::nn::tensor::Tensor;

/// Literal convolution: every output element is an explicit sum over the
/// receptive field. Applies the optional layers in the same order as
/// [`crate::nn::conv2d`].
pub fn conv2d_direct(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let [n, c, h, w] = input.shape();
    let (k, s, pad) = (spec.kernel(), spec.stride, spec.padding);
    let (oh, ow) = out_dims(h, w, k, s, pad)?;
    let o_ch = spec.out_channels();
    assert_eq!(c, spec.in_channels());
    let add = spec.implicit_add.clone().unwrap_or_else(|| vec![0.0; c]);
    Ok(Tensor::from_fn([n, o_ch, oh, ow], |[b, o, y, x]| {
        let mut acc = spec.bias[o] as f64;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * s + ky) as isize - pad as isize;
                    let ix = (x * s + kx) as isize - pad as isize;
                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                        continue;
                    }
                    let v = input.at([b, ci, iy as usize, ix as usize]) + add[ci];
                    acc += spec.weight.at([o, ci, ky, kx]) as f64 * v as f64;
                }
            }
        }
        let mut v = acc;
        if let Some(bn) = &spec.bn {
            v = (v - bn.running_mean[o] as f64) / ((bn.running_var[o] + bn.eps) as f64).sqrt() * bn.gamma[o] as f64
                + bn.beta[o] as f64;
        }
        if let Some(m) = &spec.implicit_mul {
            v *= m[o] as f64;
        }
        v as f32
    }))
}
