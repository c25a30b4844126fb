//! Forward-mode dual numbers with four tangent directions, used to
//! differentiate the box losses w.r.t. the four predicted coordinates.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual {
    pub fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 4] }
    }

    pub fn variable(v: f64, axis: usize) -> Self {
        let mut d = [0.0; 4];
        d[axis] = 1.0;
        Self { v, d }
    }

    fn map(self, v: f64, slope: f64) -> Self {
        Self { v, d: self.d.map(|x| x * slope) }
    }

    /// Picks the larger operand; ties follow `self`.
    pub fn max(self, o: Self) -> Self {
        if o.v > self.v {
            o
        } else {
            self
        }
    }

    pub fn min(self, o: Self) -> Self {
        if o.v < self.v {
            o
        } else {
            self
        }
    }

    pub fn atan(self) -> Self {
        self.map(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }

    pub fn square(self) -> Self {
        self * self
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual { v: self.v + o.v, d: std::array::from_fn(|i| self.d[i] + o.d[i]) }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual { v: self.v - o.v, d: std::array::from_fn(|i| self.d[i] - o.d[i]) }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual { v: self.v * o.v, d: std::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]) }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        Dual { v: self.v * inv, d: std::array::from_fn(|i| (self.d[i] - self.v * inv * o.d[i]) * inv) }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual { v: -self.v, d: self.d.map(|x| -x) }
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    fn add(self, o: f64) -> Dual {
        Dual { v: self.v + o, d: self.d }
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    fn mul(self, o: f64) -> Dual {
        self.map(self.v * o, o)
    }
}

impl Sub<Dual> for f64 {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        -o + self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_rule() {
        let x = Dual::variable(2.0, 0);
        let y = Dual::variable(4.0, 1);
        let q = x / y;
        assert_eq!(q.v, 0.5);
        assert_eq!(q.d[0], 0.25);
        assert_eq!(q.d[1], -2.0 / 16.0);
    }

    #[test]
    fn atan_slope() {
        let x = Dual::variable(1.0, 2).atan();
        assert!((x.v - std::f64::consts::FRAC_PI_4).abs() < 1e-15);
        assert!((x.d[2] - 0.5).abs() < 1e-15);
    }
}
