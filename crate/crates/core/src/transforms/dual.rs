//! Forward-mode dual numbers with a fixed number of tangent directions, used
//! to differentiate the spline bin formulas.

use std::ops::{Add, Div, Mul, Sub};

pub trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn ln(self) -> Self;
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual<const N: usize> {
    pub re: f64,
    pub eps: [f64; N],
}

impl<const N: usize> Dual<N> {
    pub fn var(re: f64, slot: usize) -> Self {
        let mut eps = [0.0; N];
        eps[slot] = 1.0;
        Self { re, eps }
    }
}

impl<const N: usize> Add for Dual<N> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        let mut eps = self.eps;
        eps.iter_mut().zip(o.eps).for_each(|(a, b)| *a += b);
        Self { re: self.re + o.re, eps }
    }
}

impl<const N: usize> Sub for Dual<N> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        let mut eps = self.eps;
        eps.iter_mut().zip(o.eps).for_each(|(a, b)| *a -= b);
        Self { re: self.re - o.re, eps }
    }
}

impl<const N: usize> Mul for Dual<N> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = self.eps[i] * o.re + self.re * o.eps[i];
        }
        Self { re: self.re * o.re, eps }
    }
}

impl<const N: usize> Div for Dual<N> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.re;
        let q = self.re * inv;
        let mut eps = [0.0; N];
        for i in 0..N {
            eps[i] = (self.eps[i] - q * o.eps[i]) * inv;
        }
        Self { re: q, eps }
    }
}

impl<const N: usize> Scalar for Dual<N> {
    fn cst(v: f64) -> Self {
        Self { re: v, eps: [0.0; N] }
    }
    fn ln(self) -> Self {
        let inv = 1.0 / self.re;
        Self { re: self.re.ln(), eps: self.eps.map(|e| e * inv) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_and_log_rules() {
        let x = Dual::<2>::var(2.0, 0);
        let y = Dual::<2>::var(3.0, 1);
        let f = (x * x / y).ln() - Dual::cst(1.0);
        // f = 2 ln x - ln y - 1
        assert!((f.re - (4.0f64 / 3.0).ln() + 1.0).abs() < 1e-15);
        assert!((f.eps[0] - 1.0).abs() < 1e-15);
        assert!((f.eps[1] + 1.0 / 3.0).abs() < 1e-15);
    }
}
