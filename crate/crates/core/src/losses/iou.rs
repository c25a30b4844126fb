//! IoU-family box losses. Boxes are `[x1, y1, x2, y2]`; gradients are w.r.t.
//! the first box.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::losses::cls::LossGrad;
use crate::losses::dual::Dual;

pub type Box4 = [f64; 4];

/// Loss value and gradient w.r.t. the four coordinates of the first box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLossGrad {
    pub loss: f64,
    pub grad: [f64; 4],
}

fn check(b: &Box4, which: &str) -> Result<()> {
    if !b.iter().all(|v| v.is_finite()) || b[2] <= b[0] || b[3] <= b[1] {
        return Err(Error::Degenerate(format!("{which} box {b:?} has non-positive extent")));
    }
    Ok(())
}

struct Geometry {
    iou: Dual,
    union: Dual,
    /// Enclosing box width and height.
    cw: Dual,
    ch: Dual,
}

fn geometry(a: &[Dual; 4], b: &[Dual; 4]) -> Geometry {
    let zero = Dual::constant(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(zero);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(zero);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    Geometry { iou: inter / union, union, cw: a[2].max(b[2]) - a[0].min(b[0]), ch: a[3].max(b[3]) - a[1].min(b[1]) }
}

fn lift(a: &Box4, b: &Box4) -> ([Dual; 4], [Dual; 4]) {
    (std::array::from_fn(|i| Dual::variable(a[i], i)), b.map(Dual::constant))
}

/// `1 − GIoU = 1 − IoU + (|C| − |A∪B|) / |C|`.
pub fn giou_loss(a: &Box4, b: &Box4) -> Result<BoxLossGrad> {
    check(a, "first")?;
    check(b, "second")?;
    let (da, db) = lift(a, b);
    let g = geometry(&da, &db);
    let enclose = g.cw * g.ch;
    let loss = 1.0 - g.iou + (enclose - g.union) / enclose;
    Ok(BoxLossGrad { loss: loss.v, grad: loss.d })
}

/// `1 − IoU + ρ²/c² + α·v` with the aspect penalty
/// `v = 4/π²·(atan(w_b/h_b) − atan(w_a/h_a))²` and `α = v / ((1 − IoU) + v)`.
/// The gradient includes the dependence of `α` on the box.
pub fn ciou_loss(a: &Box4, b: &Box4) -> Result<BoxLossGrad> {
    check(a, "first")?;
    check(b, "second")?;
    let (da, db) = lift(a, b);
    let g = geometry(&da, &db);
    let diag2 = g.cw.square() + g.ch.square();
    let rho2 = ((da[0] + da[2]) * 0.5 - (db[0] + db[2]) * 0.5).square()
        + ((da[1] + da[3]) * 0.5 - (db[1] + db[3]) * 0.5).square();
    let atan_a = ((da[2] - da[0]) / (da[3] - da[1])).atan();
    let atan_b = ((db[2] - db[0]) / (db[3] - db[1])).atan();
    let v = (atan_b - atan_a).square() * (4.0 / (PI * PI));
    let denom = (1.0 - g.iou) + v;
    let alpha_v = if denom.v > 0.0 { v / denom * v } else { Dual::constant(0.0) };
    let loss = 1.0 - g.iou + rho2 / diag2 + alpha_v;
    Ok(BoxLossGrad { loss: loss.v, grad: loss.d })
}

/// Plain IoU of two boxes (zero when disjoint).
pub fn box_iou(a: &Box4, b: &Box4) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Mean absolute error in raw (pre-decode) box space; gradient `sign(d)/n`.
pub fn l1_regulation(preds: &[f64], targets: &[f64]) -> Result<LossGrad> {
    if preds.len() != targets.len() {
        return Err(Error::shape("l1_regulation", format!("{} vs {}", preds.len(), targets.len())));
    }
    if preds.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad: Vec::new() });
    }
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let grad = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            let d = p - t;
            loss += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok(LossGrad { loss: loss / n, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_zero_loss() {
        let a = [1.0, 2.0, 5.0, 7.0];
        assert!(giou_loss(&a, &a).unwrap().loss.abs() < 1e-15);
        assert!(ciou_loss(&a, &a).unwrap().loss.abs() < 1e-15);
    }

    #[test]
    fn giou_hand_geometry() {
        let l = giou_loss(&[0.0, 0.0, 1.0, 1.0], &[2.0, 2.0, 3.0, 3.0]).unwrap().loss;
        assert!((l - 16.0 / 9.0).abs() < 1e-12);
        let l = giou_loss(&[0.0, 0.0, 2.0, 2.0], &[1.0, 1.0, 3.0, 3.0]).unwrap().loss;
        assert!((l - (1.0 - (1.0 / 7.0 - 2.0 / 9.0))).abs() < 1e-12);
    }

    #[test]
    fn ciou_concentric_same_aspect() {
        let l = ciou_loss(&[0.0, 0.0, 4.0, 4.0], &[1.0, 1.0, 3.0, 3.0]).unwrap().loss;
        assert!((l - 0.75).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(giou_loss(&[0.0, 0.0, 0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(ciou_loss(&[0.0, 0.0, 1.0, 1.0], &[0.0, 3.0, 1.0, 2.0]).is_err());
    }

    #[test]
    fn l1_values() {
        assert_eq!(l1_regulation(&[1.0, 2.0], &[1.0, 2.0]).unwrap().loss, 0.0);
        let r = l1_regulation(&[1.0, -1.0, 2.0, 0.0], &[0.0; 4]).unwrap();
        assert_eq!(r.loss, 1.0);
        assert_eq!(r.grad, vec![0.25, -0.25, 0.25, 0.0]);
    }
}
