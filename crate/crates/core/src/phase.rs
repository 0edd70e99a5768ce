//! Compensated (double-double) arithmetic for large oscillatory phases.
//!
//! Phases such as `t * D^2 * l^2` reach magnitudes far beyond the range where
//! a single `f64` keeps sub-radian accuracy. Products are formed exactly as
//! head/tail pairs and reduced modulo 2π against a triple-double 2π.

use crate::error::{LabError, Result};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

/// Largest raw phase accepted by the propagators.
pub const PHASE_CEILING: f64 = 1e15;

const TWO_PI_HI: f64 = std::f64::consts::TAU;
const TWO_PI_MID: f64 = 2.449_293_598_294_706_4e-16;
const TWO_PI_LO: f64 = -5.989_539_619_436_679e-33;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    let err = (a - (s - bb)) + (b - bb);
    (s, err)
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn split(a: f64) -> (f64, f64) {
    const SPLITTER: f64 = 134_217_729.0; // 2^27 + 1
    let t = SPLITTER * a;
    let hi = t - (t - a);
    (hi, a - hi)
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    let err = ((ah * bh - p) + ah * bl + al * bh) + al * bl;
    (p, err)
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi)/2`.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };

    #[inline]
    pub const fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    /// Exact product of two doubles.
    #[inline]
    pub fn product(a: f64, b: f64) -> Self {
        let (hi, lo) = two_prod(a, b);
        Self { hi, lo }
    }

    /// `1/x` to double-double accuracy (one Newton step).
    #[inline]
    pub fn recip(x: f64) -> Self {
        let q = 1.0 / x;
        let (p, e) = two_prod(q, x);
        let r = (1.0 - p) - e;
        let (hi, lo) = quick_two_sum(q, q * r);
        Self { hi, lo }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    #[inline]
    pub fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let (hi, lo) = quick_two_sum(p, e + self.lo * b);
        Self { hi, lo }
    }

    #[inline]
    pub fn square(self) -> Self {
        self * self
    }

    /// Remainder modulo 2π in `[-π, π]`.
    pub fn rem_two_pi(self) -> Self {
        let k = (self.hi / TWO_PI_HI).round();
        if k == 0.0 {
            return self;
        }
        let (p1, e1) = two_prod(k, TWO_PI_HI);
        let (p2, e2) = two_prod(k, TWO_PI_MID);
        let p3 = k * TWO_PI_LO;
        // self - (p1 + e1 + p2 + e2 + p3)
        let (s, t) = two_sum(self.hi, -p1);
        let t = t + self.lo - e1;
        let (s, u) = two_sum(s, -p2);
        let lo = t + u - e2 - p3;
        let (mut hi, mut lo) = quick_two_sum(s, lo);
        // k may be off by one when hi sits at the boundary
        if hi > PI {
            let r = Self { hi, lo }
                - Self {
                    hi: TWO_PI_HI,
                    lo: TWO_PI_MID,
                };
            hi = r.hi;
            lo = r.lo;
        } else if hi < -PI {
            let r = Self { hi, lo }
                + Self {
                    hi: TWO_PI_HI,
                    lo: TWO_PI_MID,
                };
            hi = r.hi;
            lo = r.lo;
        }
        Self { hi, lo }
    }
}

impl From<f64> for DoubleDouble {
    fn from(x: f64) -> Self {
        Self::from_f64(x)
    }
}

impl Neg for DoubleDouble {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for DoubleDouble {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let e = e + t;
        let (s, e) = quick_two_sum(s, e);
        let e = e + f;
        let (hi, lo) = quick_two_sum(s, e);
        Self { hi, lo }
    }
}

impl Sub for DoubleDouble {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for DoubleDouble {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Self { hi, lo }
    }
}

/// Running compensated phase sum with reduction modulo 2π.
///
/// The raw magnitude is tracked so callers can refuse phases beyond
/// [`PHASE_CEILING`], where even double-double inputs stop being meaningful.
#[derive(Copy, Clone, Debug, Default)]
pub struct PhaseAccumulator {
    sum: DoubleDouble,
    raw_magnitude: f64,
}

impl PhaseAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) -> &mut Self {
        self.add_dd(DoubleDouble::from_f64(x))
    }

    #[inline]
    pub fn add_dd(&mut self, x: DoubleDouble) -> &mut Self {
        self.raw_magnitude += x.hi.abs();
        // reduce every term so the running sum never grows past 2π
        self.sum = (self.sum + x.rem_two_pi()).rem_two_pi();
        self
    }

    /// Adds the exact product `a * b`.
    #[inline]
    pub fn add_product(&mut self, a: f64, b: f64) -> &mut Self {
        self.add_dd(DoubleDouble::product(a, b))
    }

    /// Adds `a * b^2` with the square formed exactly.
    #[inline]
    pub fn add_scaled_square(&mut self, a: f64, b: f64) -> &mut Self {
        let sq = DoubleDouble::product(b, b);
        self.add_dd(sq.mul_f64(a))
    }

    /// Sum of absolute values of everything added so far.
    pub fn raw_magnitude(&self) -> f64 {
        self.raw_magnitude
    }

    /// Reduced phase as `(head, tail)` with `|head| <= π`.
    pub fn reduced(&self) -> (f64, f64) {
        (self.sum.hi, self.sum.lo)
    }

    pub fn value(&self) -> f64 {
        self.sum.to_f64()
    }

    pub fn check_ceiling(&self, operation: &str) -> Result<()> {
        if self.raw_magnitude > PHASE_CEILING || !self.raw_magnitude.is_finite() {
            return Err(LabError::PrecisionLoss {
                operation: operation.to_string(),
                magnitude: self.raw_magnitude,
                ceiling: PHASE_CEILING,
            });
        }
        Ok(())
    }
}

/// Phase `c0 + c1*s + c2*s^2` with double-double coefficients.
#[derive(Copy, Clone, Debug, Default)]
pub struct QuadraticPhase {
    pub c0: DoubleDouble,
    pub c1: DoubleDouble,
    pub c2: DoubleDouble,
}

impl QuadraticPhase {
    pub fn new(c0: DoubleDouble, c1: DoubleDouble, c2: DoubleDouble) -> Self {
        Self { c0, c1, c2 }
    }

    pub fn from_f64(c0: f64, c1: f64, c2: f64) -> Self {
        Self::new(c0.into(), c1.into(), c2.into())
    }

    /// Phase at `s`, reduced modulo 2π.
    #[inline]
    pub fn eval_reduced(&self, s: f64) -> f64 {
        let s_dd = DoubleDouble::from_f64(s);
        let v = self.c0.rem_two_pi()
            + (self.c1.mul_f64(s)).rem_two_pi()
            + (self.c2 * s_dd.square()).rem_two_pi();
        v.rem_two_pi().to_f64()
    }

    #[inline]
    pub fn derivative(&self, s: f64) -> f64 {
        self.c1.to_f64() + 2.0 * self.c2.to_f64() * s
    }

    /// Largest raw term magnitude over `[a, b]`.
    pub fn magnitude_bound(&self, a: f64, b: f64) -> f64 {
        let m = a.abs().max(b.abs());
        self.c0.hi.abs() + self.c1.hi.abs() * m + self.c2.hi.abs() * m * m
    }

    /// Stationary point `-c1 / (2 c2)` if the phase is genuinely quadratic.
    pub fn stationary_point(&self) -> Option<f64> {
        let c2 = self.c2.to_f64();
        if c2 == 0.0 {
            None
        } else {
            Some(-self.c1.to_f64() / (2.0 * c2))
        }
    }

    pub fn check_ceiling(&self, a: f64, b: f64, operation: &str) -> Result<()> {
        let m = self.magnitude_bound(a, b);
        if m > PHASE_CEILING || !m.is_finite() {
            return Err(LabError::PrecisionLoss {
                operation: operation.to_string(),
                magnitude: m,
                ceiling: PHASE_CEILING,
            });
        }
        Ok(())
    }

    /// Re-expands the phase around `center`: returns the reduced constant and
    /// the local linear and quadratic coefficients in plain doubles.
    #[inline]
    pub fn localize(&self, center: f64) -> (f64, f64, f64) {
        let c = DoubleDouble::from_f64(center);
        let c0 = (self.c0.rem_two_pi()
            + self.c1.mul_f64(center).rem_two_pi()
            + (self.c2 * c.square()).rem_two_pi())
        .rem_two_pi();
        let slope = self.c1 + self.c2.mul_f64(2.0 * center);
        (c0.to_f64(), slope.to_f64(), self.c2.to_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_residual_is_tiny() {
        for &x in &[3.0, 7.1e-5, -1.3e-12, 2.5e9] {
            let q = DoubleDouble::recip(x);
            let r = q.mul_f64(x) - DoubleDouble::from_f64(1.0);
            assert!(r.to_f64().abs() < 1e-30, "{x}: {r:?}");
        }
    }

    #[test]
    fn product_is_exact_for_representable_cases() {
        let p = DoubleDouble::product(3.0, 7.0);
        assert_eq!(p.hi, 21.0);
        assert_eq!(p.lo, 0.0);
        let x = 1.0 + f64::EPSILON;
        let p = DoubleDouble::product(x, x);
        assert_eq!(p.hi, 1.0 + 2.0 * f64::EPSILON);
        assert_eq!(p.lo, f64::EPSILON * f64::EPSILON);
    }

    #[test]
    fn reduction_lands_in_principal_range() {
        for &x in &[0.0, 3.0, -3.0, 7.0, 1e6, -1e12, 123456789.123] {
            let r = DoubleDouble::from_f64(x).rem_two_pi();
            assert!(r.hi.abs() <= PI + 1e-15, "{x} -> {}", r.hi);
            let back = (x - r.to_f64()) / (2.0 * PI);
            assert!((back - back.round()).abs() < 1e-6);
        }
    }

    #[test]
    fn ceiling_is_enforced() {
        let mut acc = PhaseAccumulator::new();
        acc.add_product(1e7, 1e7);
        assert!(acc.check_ceiling("test").is_ok());
        acc.add_product(1e7, 1e7);
        acc.add_product(1e15, 1.0);
        assert!(matches!(
            acc.check_ceiling("test"),
            Err(LabError::PrecisionLoss { .. })
        ));
    }

    #[test]
    fn localized_phase_matches_direct_evaluation() {
        let ph = QuadraticPhase::from_f64(0.3, 1234.5, 56.25);
        let center = 7.25;
        let (c0, c1, c2) = ph.localize(center);
        for &ds in &[-0.1, 0.0, 0.05, 0.1] {
            let local = c0 + c1 * ds + c2 * ds * ds;
            let direct = ph.eval_reduced(center + ds);
            let d = (local - direct).rem_euclid(2.0 * PI);
            let d = d.min(2.0 * PI - d);
            assert!(d < 1e-9, "{ds}: {d}");
        }
    }
}
