use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

/// Central-difference gradient of a scalar function, one element at a time.
///
/// The divisor is the perturbation actually realised in `f32`, which equals
/// `2·eps` up to rounding of `x ± eps`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> Result<f64>, x: &Tensor, eps: f32) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps", "must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let f_hi = f(&probe)?;
        probe.data_mut()[i] = lo;
        let f_lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite(format!("f at element {i}")));
        }
        grad.data_mut()[i] = ((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32;
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
