//! Convolution parameters and the inference-time convolution.
//!
//! The kernels lower each batch item to a column matrix and run a single
//! `sgemm`; `nn::reference` keeps a direct nested-loop version as the oracle.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub const DEFAULT_EPS: f32 = 1e-3;

    /// γ = 1, β = 0, mean = 0, var = 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape("BatchNormParams", "per-channel arrays differ in length"));
        }
        if self.running_var.iter().any(|&v| v < 0.0) {
            return Err(Error::invalid("running_var", "negative variance"));
        }
        // eps = 0 is accepted for exact folding arithmetic as long as var + eps > 0.
        if self.eps < 0.0 || self.running_var.iter().any(|&v| v + self.eps <= 0.0) {
            return Err(Error::invalid("eps", "var + eps must be positive"));
        }
        Ok(())
    }

    /// Per-channel `(scale, shift)` so that `bn(y) = scale * y + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let scale: Vec<f32> =
            self.gamma.iter().zip(&self.running_var).map(|(&g, &v)| g / (v + self.eps).sqrt()).collect();
        let shift = self.beta.iter().zip(&self.running_mean).zip(&scale).map(|((&b, &m), &s)| b - m * s).collect();
        (scale, shift)
    }

    /// Inference-mode normalization with running statistics.
    pub fn apply(&self, x: &mut Tensor) -> Result<()> {
        if x.channels() != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("{} channels vs bn over {}", x.channels(), self.channels()),
            ));
        }
        let (scale, shift) = self.affine();
        scale_shift_channels(x, &scale, &shift);
        Ok(())
    }
}

/// `x[:, c] = x[:, c] * scale[c] + shift[c]`.
pub(crate) fn scale_shift_channels(x: &mut Tensor, scale: &[f32], shift: &[f32]) {
    let plane = x.plane();
    let c = x.channels();
    for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        let (s, t) = (scale[i % c], shift[i % c]);
        for v in chunk {
            *v = *v * s + t;
        }
    }
}

/// Convolution weights plus the optional layers fused around them:
/// `implicit_mul * bn(W * (x + implicit_add) + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    /// `[out_ch, in_ch, k, k]`.
    pub weight: Tensor,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
    pub bn: Option<BatchNormParams>,
    pub implicit_add: Option<Vec<f32>>,
    pub implicit_mul: Option<Vec<f32>>,
}

impl ConvSpec {
    pub fn new(weight: Tensor, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self> {
        let spec = Self { weight, bias, stride, padding, bn: None, implicit_add: None, implicit_mul: None };
        spec.validate()?;
        Ok(spec)
    }

    /// Zero weights and bias; `same` padding for odd `k`.
    pub fn zeros(in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        Self {
            weight: Tensor::zeros([out_ch, in_ch, k, k]),
            bias: vec![0.0; out_ch],
            stride,
            padding: k / 2,
            bn: None,
            implicit_add: None,
            implicit_mul: None,
        }
    }

    pub fn with_bn(mut self, bn: BatchNormParams) -> Self {
        self.bn = Some(bn);
        self
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }
    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [o, i, kh, kw] = self.weight.shape();
        if kh != kw {
            return Err(Error::shape("ConvSpec", format!("non-square kernel {kh}x{kw}")));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride", "must be positive"));
        }
        if self.bias.len() != o {
            return Err(Error::shape("ConvSpec", format!("bias {} vs out_ch {o}", self.bias.len())));
        }
        if let Some(bn) = &self.bn {
            bn.validate()?;
            if bn.channels() != o {
                return Err(Error::shape("ConvSpec", format!("bn {} vs out_ch {o}", bn.channels())));
            }
        }
        if let Some(a) = &self.implicit_add {
            if a.len() != i {
                return Err(Error::shape("ConvSpec", format!("implicit_add {} vs in_ch {i}", a.len())));
            }
        }
        if let Some(m) = &self.implicit_mul {
            if m.len() != o {
                return Err(Error::shape("ConvSpec", format!("implicit_mul {} vs out_ch {o}", m.len())));
            }
        }
        Ok(())
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        out_dims(h, w, self.kernel(), self.stride, self.padding)
    }

    /// Learnable scalars; running statistics excluded.
    pub fn param_count(&self) -> usize {
        self.weight.len()
            + self.bias.len()
            + self.bn.as_ref().map_or(0, |bn| 2 * bn.channels())
            + self.implicit_add.as_ref().map_or(0, Vec::len)
            + self.implicit_mul.as_ref().map_or(0, Vec::len)
    }

    pub fn is_plain(&self) -> bool {
        self.bn.is_none() && self.implicit_add.is_none() && self.implicit_mul.is_none()
    }
}

pub(crate) fn out_dims(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::shape("conv2d", format!("input {h}x{w} with padding {pad} smaller than kernel {k}")));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

/// Applies `spec` in inference mode (batch-norm uses running statistics).
pub fn conv2d(input: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    if input.channels() != spec.in_channels() {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {}", input.channels(), spec.in_channels()),
        ));
    }
    let shifted;
    let x = match &spec.implicit_add {
        Some(a) => {
            let mut t = input.clone();
            add_channels(&mut t, a);
            shifted = t;
            &shifted
        }
        None => input,
    };
    let mut y = conv_raw(x, &spec.weight, &spec.bias, spec.stride, spec.padding)?;
    if let Some(bn) = &spec.bn {
        bn.apply(&mut y)?;
    }
    if let Some(m) = &spec.implicit_mul {
        let zeros = vec![0.0; m.len()];
        scale_shift_channels(&mut y, m, &zeros);
    }
    Ok(y)
}

pub(crate) fn add_channels(x: &mut Tensor, a: &[f32]) {
    let plane = x.plane();
    let c = x.channels();
    for (i, chunk) in x.data_mut().chunks_mut(plane).enumerate() {
        let v = a[i % c];
        chunk.iter_mut().for_each(|e| *e += v);
    }
}

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_c: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Geometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [out_c, in_c, k, _] = weight.shape();
        if input.channels() != in_c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {in_c}", input.channels()),
            ));
        }
        let (out_h, out_w) = out_dims(input.height(), input.width(), k, stride, pad)?;
        Ok(Self { in_c, in_h: input.height(), in_w: input.width(), k, stride, pad, out_c, out_h, out_w })
    }

    /// Rows of the column matrix.
    pub fn cols_k(&self) -> usize {
        self.in_c * self.k * self.k
    }
    /// Columns of the column matrix.
    pub fn cols_p(&self) -> usize {
        self.out_h * self.out_w
    }
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
    pub fn in_item(&self) -> usize {
        self.in_c * self.in_h * self.in_w
    }
    pub fn out_item(&self) -> usize {
        self.out_c * self.out_h * self.out_w
    }
}

pub(crate) fn im2col(x: &[f32], g: &Geometry, cols: &mut [f32]) {
    let p = g.cols_p();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, d) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds a column-matrix gradient back onto the input layout.
pub(crate) fn col2im(cols: &[f32], g: &Geometry, dx: &mut [f32]) {
    let p = g.cols_p();
    let mut row = 0;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            dst[ix as usize] += v;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Row-major strided matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub row_stride: usize,
    pub col_stride: usize,
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, `c` contiguous row-major.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat<'_>, b: Mat<'_>, beta: f32, c: &mut [f32]) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let last = |rows: usize, cols: usize, mat: &Mat<'_>| (rows - 1) * mat.row_stride + (cols - 1) * mat.col_stride;
    assert!(last(m, k, &a) < a.data.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, &b) < b.data.len(), "gemm: rhs out of bounds");
    // SAFETY: every index sgemm touches lies within the bounds asserted above;
    // `c` is a distinct mutable slice of at least m*n elements.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `W * x + b` for every batch item.
pub(crate) fn conv_raw(input: &Tensor, weight: &Tensor, bias: &[f32], stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(input, weight, stride, pad)?;
    let n = input.batch();
    let mut out = Tensor::zeros([n, g.out_c, g.out_h, g.out_w]);
    let (kk, p) = (g.cols_k(), g.cols_p());
    let w = Mat { data: weight.data(), row_stride: kk, col_stride: 1 };
    out.data_mut().par_chunks_mut(g.out_item().max(1)).enumerate().for_each_init(Vec::new, |cols, (b, dst)| {
        for (o, row) in dst.chunks_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        let x = input.item(b);
        let rhs = if g.is_pointwise() {
            x
        } else {
            cols.resize(kk * p, 0.0);
            im2col(x, &g, cols);
            cols.as_slice()
        };
        gemm(g.out_c, kk, p, w, Mat { data: rhs, row_stride: p, col_stride: 1 }, 1.0, dst);
    });
    Ok(out)
}

/// Gradients of `W * x + b` given the upstream gradient.
pub(crate) struct RawConvGrads {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
    pub input: Option<Tensor>,
}

pub(crate) fn conv_raw_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
    need_input_grad: bool,
) -> Result<RawConvGrads> {
    let g = Geometry::new(input, weight, stride, pad)?;
    if grad_out.shape() != [input.batch(), g.out_c, g.out_h, g.out_w] {
        return Err(Error::shape(
            "conv2d backward",
            format!("grad {:?} vs output [{}, {}, {}, {}]", grad_out.shape(), input.batch(), g.out_c, g.out_h, g.out_w),
        ));
    }
    let (kk, p) = (g.cols_k(), g.cols_p());
    let per_item: Vec<(Vec<f32>, Vec<f32>, Option<Vec<f32>>)> = (0..input.batch())
        .into_par_iter()
        .map(|b| {
            let x = input.item(b);
            let dy = grad_out.item(b);
            let mut cols_buf = Vec::new();
            let cols: &[f32] = if g.is_pointwise() {
                x
            } else {
                cols_buf.resize(kk * p, 0.0);
                im2col(x, &g, &mut cols_buf);
                &cols_buf
            };
            let mut dw = vec![0.0; g.out_c * kk];
            gemm(
                g.out_c,
                p,
                kk,
                Mat { data: dy, row_stride: p, col_stride: 1 },
                Mat { data: cols, row_stride: 1, col_stride: p },
                0.0,
                &mut dw,
            );
            let db: Vec<f32> = dy.chunks(p).map(|r| r.iter().map(|&v| v as f64).sum::<f64>() as f32).collect();
            let dx = need_input_grad.then(|| {
                let mut dcols = vec![0.0; kk * p];
                gemm(
                    kk,
                    g.out_c,
                    p,
                    Mat { data: weight.data(), row_stride: 1, col_stride: kk },
                    Mat { data: dy, row_stride: p, col_stride: 1 },
                    0.0,
                    &mut dcols,
                );
                if g.is_pointwise() {
                    dcols
                } else {
                    let mut dx = vec![0.0; g.in_item()];
                    col2im(&dcols, &g, &mut dx);
                    dx
                }
            });
            (dw, db, dx)
        })
        .collect();

    let mut weight_grad = vec![0.0; g.out_c * kk];
    let mut bias_grad = vec![0.0; g.out_c];
    let mut input_grad = need_input_grad.then(|| Vec::with_capacity(input.len()));
    for (dw, db, dx) in per_item {
        weight_grad.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
        bias_grad.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        if let (Some(acc), Some(dx)) = (input_grad.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
    }
    Ok(RawConvGrads {
        weight: weight_grad,
        bias: bias_grad,
        input: input_grad.map(|d| Tensor::new(input.shape(), d)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_reproduces_input() {
        let x = Tensor::from_fn([1, 1, 3, 3], |[_, _, y, x]| (y * 3 + x) as f32);
        let mut spec = ConvSpec::zeros(1, 1, 3, 1);
        spec.weight.data_mut()[4] = 1.0;
        assert_eq!(conv2d(&x, &spec).unwrap(), x);
    }

    #[test]
    fn pointwise_sums_channels() {
        let x = Tensor::full([1, 2, 2, 2], 1.0);
        let spec = ConvSpec::new(Tensor::new([1, 2, 1, 1], vec![1.0, 1.0]).unwrap(), vec![0.0], 1, 0).unwrap();
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn zero_implicit_mul_annihilates() {
        let x = Tensor::from_fn([2, 3, 4, 4], |[b, c, y, x]| (b + c) as f32 - (y * x) as f32 * 0.1);
        let mut spec = ConvSpec::zeros(3, 2, 3, 1);
        spec.weight.data_mut().iter_mut().enumerate().for_each(|(i, w)| *w = i as f32 * 0.01);
        spec.bias = vec![0.5, -1.0];
        spec.implicit_mul = Some(vec![0.0, 0.0]);
        assert!(conv2d(&x, &spec).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        let spec = ConvSpec::zeros(2, 1, 1, 1);
        assert!(matches!(conv2d(&x, &spec), Err(Error::Shape { .. })));
    }

    #[test]
    fn strided_output_dims() {
        let x = Tensor::zeros([1, 1, 8, 6]);
        let spec = ConvSpec::zeros(1, 4, 3, 2);
        assert_eq!(conv2d(&x, &spec).unwrap().shape(), [1, 4, 4, 3]);
    }
}
