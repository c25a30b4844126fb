//! Classification / objectness losses over post-sigmoid probabilities.
//! All return the mean loss and its gradient w.r.t. each probability.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 − EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

/// Loss value and gradient w.r.t. the inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Predictions, targets and the per-element random draws of the hybrid loss.
#[derive(Clone, Debug, Default)]
pub struct PredTargetBatch {
    pub p: Vec<f64>,
    pub t: Vec<f64>,
    pub r: Vec<f64>,
}

impl PredTargetBatch {
    pub fn new(p: Vec<f64>, t: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        let batch = Self { p, t, r };
        batch.validate()?;
        Ok(batch)
    }

    fn validate(&self) -> Result<()> {
        if self.p.len() != self.t.len() || self.p.len() != self.r.len() {
            return Err(Error::shape(
                "PredTargetBatch",
                format!("p {}, t {}, r {}", self.p.len(), self.t.len(), self.r.len()),
            ));
        }
        if self.r.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::invalid("r", "draws must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_pt(p: &[f64], t: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid("P", "empty batch"));
    }
    if p.len() != t.len() {
        return Err(Error::shape("loss", format!("P has {} elements, T has {}", p.len(), t.len())));
    }
    Ok(())
}

#[inline]
fn clamp(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Mean of an elementwise `(value, d/dp)` function.
fn mean_elementwise(n: usize, mut f: impl FnMut(usize) -> (f64, f64)) -> LossGrad {
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let (v, d) = f(i);
        loss += v;
        grad.push(d * inv);
    }
    LossGrad { loss: loss * inv, grad }
}

/// Hybrid-random loss: per element,
/// `hrl(p, t) = [4(1−p)²r + (1−r)]·t·ln p + [12p²r + (1−r)]·(1−t)·ln(1−p)`,
/// averaged as `−(1/n)·Σ hrl`.
pub fn hrl(batch: &PredTargetBatch) -> Result<LossGrad> {
    batch.validate()?;
    check_pt(&batch.p, &batch.t)?;
    Ok(mean_elementwise(batch.p.len(), |i| {
        let (p, t, r) = (clamp(batch.p[i]), batch.t[i], batch.r[i]);
        let (lp, lq) = (p.ln(), (1.0 - p).ln());
        let pos_w = 4.0 * (1.0 - p).powi(2) * r + (1.0 - r);
        let neg_w = 12.0 * p * p * r + (1.0 - r);
        let h = pos_w * t * lp + neg_w * (1.0 - t) * lq;
        let dpos_w = -8.0 * (1.0 - p) * r;
        let dneg_w = 24.0 * p * r;
        let dh = t * (dpos_w * lp + pos_w / p) + (1.0 - t) * (dneg_w * lq - neg_w / (1.0 - p));
        (-h, -dh)
    }))
}

/// Binary cross-entropy, mean over elements.
pub fn bce(p: &[f64], t: &[f64]) -> Result<LossGrad> {
    check_pt(p, t)?;
    Ok(mean_elementwise(p.len(), |i| {
        let (pc, ti) = (clamp(p[i]), t[i]);
        let v = ti * pc.ln() + (1.0 - ti) * (1.0 - pc).ln();
        (-v, -(ti / pc - (1.0 - ti) / (1.0 - pc)))
    }))
}

/// Focal loss `−α·t·(1−p)^γ·ln p − (1−α)·(1−t)·p^γ·ln(1−p)`, mean over elements.
pub fn focal(p: &[f64], t: &[f64], gamma: f64, alpha: f64) -> Result<LossGrad> {
    check_pt(p, t)?;
    if !(gamma >= 0.0) {
        return Err(Error::invalid("gamma", "must be non-negative"));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid("alpha", "must lie in (0, 1)"));
    }
    Ok(mean_elementwise(p.len(), |i| {
        let (pc, ti) = (clamp(p[i]), t[i]);
        let (q, lp, lq) = (1.0 - pc, pc.ln(), (1.0 - pc).ln());
        let pos = alpha * ti * q.powf(gamma);
        let neg = (1.0 - alpha) * (1.0 - ti) * pc.powf(gamma);
        let v = -(pos * lp + neg * lq);
        let dpos = -alpha * ti * gamma * q.powf(gamma - 1.0);
        let dneg = (1.0 - alpha) * (1.0 - ti) * gamma * pc.powf(gamma - 1.0);
        let d = -(dpos * lp + pos / pc + dneg * lq - neg / q);
        (v, d)
    }))
}
