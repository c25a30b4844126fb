use crate::error::{Error, Result};

/// `(batch, channels, height, width)`.
pub type Shape = [usize; 4];

/// Dense NCHW `f32` tensor, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self { shape, data: vec![value; shape.iter().product()] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> f32) -> Self {
        let [n, c, h, w] = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f([b, ch, y, x]));
                    }
                }
            }
        }
        Self { shape, data }
    }

    /// 1-D vector stored as `[len, 1, 1, 1]`.
    pub fn vector(values: Vec<f32>) -> Self {
        Self { shape: [values.len(), 1, 1, 1], data: values }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
    pub fn batch(&self) -> usize {
        self.shape[0]
    }
    pub fn channels(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    /// Spatial plane size `h * w`.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }
    pub fn len(&self) -> usize {
        self.data.len()
    }
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn data(&self) -> &[f32] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, [b, c, y, x]: [usize; 4]) -> usize {
        ((b * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn at(&self, idx: [usize; 4]) -> f32 {
        self.data[self.index(idx)]
    }

    /// One batch item as a contiguous `c*h*w` slice.
    pub fn item(&self, b: usize) -> &[f32] {
        let step = self.shape[1] * self.plane();
        &self.data[b * step..(b + 1) * step]
    }

    pub fn item_mut(&mut self, b: usize) -> &mut [f32] {
        let step = self.shape[1] * self.plane();
        &mut self.data[b * step..(b + 1) * step]
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Self { shape: self.shape, data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, k: f32) -> Self {
        self.map(|v| v * k)
    }

    /// Sum accumulated in `f64`.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::invalid("parts", "empty concat"))?;
        let [n, _, h, w] = first.shape;
        for p in parts {
            if p.shape[0] != n || p.shape[2] != h || p.shape[3] != w {
                return Err(Error::shape("concat_channels", format!("{:?} vs {:?}", first.shape, p.shape)));
            }
        }
        let c_total: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * c_total * h * w);
        for b in 0..n {
            for p in parts {
                data.extend_from_slice(p.item(b));
            }
        }
        Ok(Self { shape: [n, c_total, h, w], data })
    }

    /// Inverse of [`Tensor::concat_channels`]: splits into consecutive channel groups.
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Tensor>> {
        if sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(Error::shape("split_channels", format!("sizes {sizes:?} vs {} channels", self.shape[1])));
        }
        let [n, _, h, w] = self.shape;
        let plane = h * w;
        let mut out: Vec<Vec<f32>> = sizes.iter().map(|&c| Vec::with_capacity(n * c * plane)).collect();
        for b in 0..n {
            let item = self.item(b);
            let mut offset = 0;
            for (dst, &c) in out.iter_mut().zip(sizes) {
                dst.extend_from_slice(&item[offset * plane..(offset + c) * plane]);
                offset += c;
            }
        }
        Ok(out.into_iter().zip(sizes).map(|(data, &c)| Tensor { shape: [n, c, h, w], data }).collect())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::invalid("items", "empty stack"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if t.shape[1..] != first.shape[1..] {
                return Err(Error::shape("stack", format!("{:?} vs {:?}", first.shape, t.shape)));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: [n, c, h, w], data })
    }

    /// Batch item `b` as its own `[1, c, h, w]` tensor.
    pub fn select(&self, b: usize) -> Tensor {
        Tensor { shape: [1, self.shape[1], self.shape[2], self.shape[3]], data: self.item(b).to_vec() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_wrong_length() {
        assert!(Tensor::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let a = Tensor::from_fn([2, 1, 2, 2], |[b, _, y, x]| (b * 10 + y * 2 + x) as f32);
        let b = Tensor::from_fn([2, 3, 2, 2], |[b, c, y, x]| -((b * 100 + c * 10 + y * 2 + x) as f32));
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), [2, 4, 2, 2]);
        assert_eq!(cat.at([1, 0, 1, 1]), a.at([1, 0, 1, 1]));
        assert_eq!(cat.at([1, 3, 0, 1]), b.at([1, 2, 0, 1]));
        let parts = cat.split_channels(&[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }
}
