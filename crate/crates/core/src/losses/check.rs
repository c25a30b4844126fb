//! Finite-difference audit of every loss gradient, shared by the CLI and
//! the acceptance suite.

use rand::Rng;
use serde::Serialize;

use super::{bce, ciou_loss, focal, giou_loss, hrl, l1_regulation, Box4, PredTargetBatch};
use crate::error::Result;
use crate::rng::{derive_seed, keyed};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub batches: usize,
    /// Worst norm-wise relative error (or absolute difference for the
    /// reduction check) over all batches.
    pub worst: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    fn new(name: &str, batches: usize, worst: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), batches, worst, tolerance, pass: worst.is_finite() && worst <= tolerance }
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn fd(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let hi = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * FD_STEP)
        })
        .collect()
}

struct Draw {
    p: Vec<f64>,
    t: Vec<f64>,
    r: Vec<f64>,
}

fn draw(rng: &mut impl Rng) -> Draw {
    let n = rng.random_range(1..=32);
    let p = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let t = (0..n)
        .map(|_| if rng.random_bool(0.3) { rng.random::<f64>() } else { rng.random_range(0..2) as f64 })
        .collect();
    let r = (0..n).map(|_| rng.random::<f64>()).collect();
    Draw { p, t, r }
}

fn random_box(rng: &mut impl Rng) -> Box4 {
    let (x, y) = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
    [x, y, x + rng.random_range(0.5..6.0), y + rng.random_range(0.5..6.0)]
}

/// Runs the whole suite with `batches` random draws per loss.
pub fn run_loss_checks(seed: u64, batches: usize) -> Result<Vec<CheckRow>> {
    let seed = derive_seed(seed, "loss-check");
    let mut rows = Vec::new();
    let mut worst = [0.0f64; 4];
    for k in 0..batches {
        let d = draw(&mut keyed(seed, k as u64));
        let zero = vec![0.0; d.p.len()];
        let a = hrl(&PredTargetBatch::new(d.p.clone(), d.t.clone(), zero)?)?.loss;
        worst[0] = worst[0].max((a - bce(&d.p, &d.t)?.loss).abs());

        let h = hrl(&PredTargetBatch::new(d.p.clone(), d.t.clone(), d.r.clone())?)?;
        let num = fd(&d.p, |p| hrl(&PredTargetBatch::new(p.to_vec(), d.t.clone(), d.r.clone()).unwrap()).unwrap().loss);
        worst[1] = worst[1].max(rel_err(&h.grad, &num));

        let b = bce(&d.p, &d.t)?;
        worst[2] = worst[2].max(rel_err(&b.grad, &fd(&d.p, |p| bce(p, &d.t).unwrap().loss)));

        let gamma = [0.0, 1.0, 2.0, 3.5][k % 4];
        let alpha = 0.1 + 0.8 * (k % 7) as f64 / 6.0;
        let f = focal(&d.p, &d.t, gamma, alpha)?;
        worst[3] = worst[3].max(rel_err(&f.grad, &fd(&d.p, |p| focal(p, &d.t, gamma, alpha).unwrap().loss)));
    }
    rows.push(CheckRow::new("hrl(r=0) == bce", batches, worst[0], 1e-12));
    rows.push(CheckRow::new("hrl grad", batches, worst[1], 1e-4));
    rows.push(CheckRow::new("bce grad", batches, worst[2], 1e-4));
    rows.push(CheckRow::new("focal grad", batches, worst[3], 1e-4));

    let mut worst = [0.0f64; 3];
    for k in 0..batches {
        let mut rng = keyed(seed, (batches + k) as u64);
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let as_box = |v: &[f64]| -> Box4 { [v[0], v[1], v[2], v[3]] };
        let g = giou_loss(&a, &b)?;
        worst[0] = worst[0].max(rel_err(&g.grad, &fd(&a, |v| giou_loss(&as_box(v), &b).unwrap().loss)));
        let c = ciou_loss(&a, &b)?;
        worst[1] = worst[1].max(rel_err(&c.grad, &fd(&a, |v| ciou_loss(&as_box(v), &b).unwrap().loss)));

        let n = rng.random_range(1..=32);
        let targets: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        // Keep every difference clear of the kink at zero.
        let preds: Vec<f64> = targets
            .iter()
            .map(|t| t + rng.random_range(0.01..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let l = l1_regulation(&preds, &targets)?;
        worst[2] = worst[2].max(rel_err(&l.grad, &fd(&preds, |p| l1_regulation(p, &targets).unwrap().loss)));
    }
    rows.push(CheckRow::new("giou grad", batches, worst[0], 1e-4));
    rows.push(CheckRow::new("ciou grad", batches, worst[1], 1e-3));
    rows.push(CheckRow::new("l1 grad", batches, worst[2], 1e-4));
    Ok(rows)
}

/// Fixed-width table of the rows.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<18} {:>7} {:>12} {:>9}  result\n", "check", "batches", "worst", "tol");
    for r in rows {
        s += &format!(
            "{:<18} {:>7} {:>12.3e} {:>9.0e}  {}\n",
            r.name,
            r.batches,
            r.worst,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let rows = run_loss_checks(3, 20).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.pass), "{}", format_table(&rows));
    }
}
