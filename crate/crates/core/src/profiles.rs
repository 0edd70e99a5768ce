//! Smooth compactly supported building blocks.
//!
//! * [`BumpProfile`]: the plateau bump `ǧ`, equal to 1 on `|x| <= 1/2` and
//!   vanishing for `|x| >= 1`.
//! * [`FourierTable`]: `g(ξ) = ∫ e^{-iξx} ǧ(x) dx` tabulated with quintic
//!   Hermite pieces, plus a certified tail envelope for truncating integrals.
//! * [`FrequencyBump`]: `ψ̂`, the same bump squeezed onto `(-r, r)` with
//!   `r = (n-1)^{-1/2}` and scaled so that `ψ(0) = 1`.

use crate::error::{LabError, Result};
use crate::phase::QuadraticPhase;
use crate::quad::{integrate_chirp, integrate_real, GaussLegendre, QuadratureSpec};
use num_complex::Complex64;
use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

/// Smoothstep plateau bump.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BumpProfile {
    pub plateau_half_width: f64,
    pub support_half_width: f64,
    /// `a` in `ρ(t) = exp(-a/t)`.
    pub sharpness: f64,
}

impl Default for BumpProfile {
    fn default() -> Self {
        Self {
            plateau_half_width: 0.5,
            support_half_width: 1.0,
            sharpness: 1.0,
        }
    }
}

/// `σ(t) = ρ(t) / (ρ(t) + ρ(1-t))`, `ρ(t) = exp(-a/t)` for `t > 0`.
#[inline]
pub fn smoothstep(t: f64, a: f64) -> f64 {
    if t >= 1.0 {
        1.0
    } else if t <= 0.0 {
        0.0
    } else {
        let e = a / t - a / (1.0 - t);
        if e > 700.0 {
            0.0
        } else {
            1.0 / (1.0 + e.exp())
        }
    }
}

impl BumpProfile {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let ax = x.abs();
        if ax <= self.plateau_half_width {
            1.0
        } else if ax >= self.support_half_width {
            0.0
        } else {
            let t = (self.support_half_width - ax)
                / (self.support_half_width - self.plateau_half_width);
            smoothstep(t, self.sharpness)
        }
    }

    fn breakpoints(&self) -> [f64; 2] {
        [-self.plateau_half_width, self.plateau_half_width]
    }

    /// `∫ e^{-iξx} ǧ(x) dx` by adaptive quadrature over the support.
    pub fn fourier(&self, xi: f64, tol: f64) -> Result<Complex64> {
        if !(tol > 0.0) {
            return Err(LabError::InvalidParameter(format!(
                "bump_fourier needs tol > 0, got {tol}"
            )));
        }
        let s = self.support_half_width;
        let spec = QuadratureSpec {
            rel_tol: 1e-300,
            abs_tol: tol,
            max_panels: 1 << 16,
        };
        let phase = QuadraticPhase::from_f64(0.0, -xi, 0.0);
        let est = integrate_chirp(
            |x| Complex64::new(self.eval(x), 0.0),
            &phase,
            -s,
            s,
            &self.breakpoints(),
            0.125,
            &spec,
            "bump_fourier",
        )?;
        Ok(est.value)
    }

    /// `∫ ǧ^p` for p = 1, 2.
    pub fn lp_power(&self, p: i32) -> f64 {
        let s = self.support_half_width;
        let spec = QuadratureSpec::new(1e-15, 1e-16);
        integrate_real(
            |x| self.eval(x).powi(p),
            -s,
            s,
            &self.breakpoints(),
            0.125,
            &spec,
            "bump_lp",
        )
        .map(|(v, _)| v)
        .unwrap_or(f64::NAN)
    }
}

/// `ǧ` of the standard profile.
#[inline]
pub fn bump_eval(x: f64) -> f64 {
    BumpProfile::default().eval(x)
}

/// `g(ξ)` of the standard profile by direct adaptive quadrature.
pub fn bump_fourier(xi: f64, tol: f64) -> Result<Complex64> {
    BumpProfile::default().fourier(xi, tol)
}

/// Tabulated `g`, even and real, on `[0, xi_max]` with spacing `step`.
pub struct FourierTable {
    profile: BumpProfile,
    step: f64,
    xi_max: f64,
    values: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    est_err: Vec<f64>,
    /// `tail[j]` bounds `∫_{ξ_j}^{∞} |g|`.
    tail: Vec<f64>,
    /// `suffix_max[j]` bounds `|g|` on `[ξ_j, ∞)`.
    suffix_max: Vec<f64>,
    /// `|g(ξ)| <= a exp(-b sqrt(ξ))` beyond the table.
    envelope: [f64; 2],
    tolerance: f64,
}

const TABLE_STEP: f64 = 1.0 / 16.0;
const TABLE_XI_MAX: f64 = 1024.0;

impl FourierTable {
    /// The shared table of the standard profile.
    pub fn standard() -> &'static FourierTable {
        static TABLE: OnceLock<FourierTable> = OnceLock::new();
        TABLE.get_or_init(|| FourierTable::build(BumpProfile::default(), TABLE_STEP, TABLE_XI_MAX))
    }

    /// Tabulates `g, g', g''` with two composite Gauss rules (coarse and
    /// halved) over `[0, s]`; their difference is the per-node error estimate.
    pub fn build(profile: BumpProfile, step: f64, xi_max: f64) -> Self {
        let n = (xi_max / step).round() as usize + 1;
        let coarse = Self::integrate_grid(&profile, step, n, 1);
        let fine = Self::integrate_grid(&profile, step, n, 2);
        let est_err: Vec<f64> = coarse[0]
            .iter()
            .zip(&fine[0])
            .map(|(a, b)| (a - b).abs())
            .collect();
        let [values, d1, d2] = fine;

        // running envelope: a cell maximum of the quintic interpolant is bounded
        // by the node values plus the derivative times half a step
        let mut cell_max = vec![0.0; n];
        for j in 0..n - 1 {
            let m = values[j].abs().max(values[j + 1].abs());
            let slope = d1[j].abs().max(d1[j + 1].abs());
            cell_max[j] = m + 0.5 * step * slope;
        }
        cell_max[n - 1] = values[n - 1].abs();

        // envelope fit on the last quarter: b from the decay of the running
        // maxima, a as the smallest amplitude that dominates every node there
        let start = 3 * n / 4;
        let mut run_max = vec![0.0; n];
        let mut m = 0.0f64;
        for j in (0..n).rev() {
            m = m.max(cell_max[j]);
            run_max[j] = m;
        }
        let xs: Vec<f64> = (start..n).map(|j| (j as f64 * step).sqrt()).collect();
        let ys: Vec<f64> = (start..n).map(|j| run_max[j].max(1e-300).ln()).collect();
        let slope = crate::fit::least_squares(&xs, &ys)
            .map(|f| f.0)
            .unwrap_or(-1.0);
        let b = (-slope).max(0.0);
        let a = (start..n)
            .map(|j| cell_max[j] * (b * (j as f64 * step).sqrt()).exp())
            .fold(0.0f64, f64::max);
        let envelope = [a, b];

        let x_end = (n - 1) as f64 * step;
        let analytic_tail = if b > 0.0 {
            let sx = x_end.sqrt();
            a * 2.0 * (b * sx + 1.0) * (-b * sx).exp() / (b * b)
        } else {
            f64::INFINITY
        };
        let mut tail = vec![0.0; n];
        let mut acc = analytic_tail;
        tail[n - 1] = acc;
        for j in (0..n - 1).rev() {
            acc += cell_max[j] * step;
            tail[j] = acc;
        }

        let beyond = a * (-b * x_end.sqrt()).exp();
        let mut suffix_max = vec![0.0; n];
        let mut m = beyond;
        for j in (0..n).rev() {
            m = m.max(cell_max[j]);
            suffix_max[j] = m;
        }

        let tolerance = est_err.iter().fold(0.0f64, |m, &e| m.max(e));
        Self {
            profile,
            step,
            xi_max: x_end,
            values,
            d1,
            d2,
            est_err,
            tail,
            suffix_max,
            envelope,
            tolerance,
        }
    }

    /// `[g, g', g'']` on the grid `ξ_j = j*step`, from `g(ξ) = 2∫_0^s cos(ξx) ǧ(x) dx`.
    fn integrate_grid(profile: &BumpProfile, step: f64, n: usize, refine: usize) -> [Vec<f64>; 3] {
        let gl = GaussLegendre::order16();
        let s = profile.support_half_width;
        let p = profile.plateau_half_width;
        let panels_per_piece = 64 * refine;
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        for (lo, hi) in [(0.0, p), (p, s)] {
            let h = (hi - lo) / panels_per_piece as f64;
            for k in 0..panels_per_piece {
                let c = lo + (k as f64 + 0.5) * h;
                for (&u, &w) in gl.nodes.iter().zip(&gl.weights) {
                    let x = c + 0.5 * h * u;
                    xs.push(x);
                    ws.push(0.5 * h * w * profile.eval(x));
                }
            }
        }
        let mut g0 = vec![0.0; n];
        let mut g1 = vec![0.0; n];
        let mut g2 = vec![0.0; n];
        // e^{i ξ_j x} by rotation, re-synchronised every 256 steps
        let rot: Vec<Complex64> = xs
            .iter()
            .map(|&x| Complex64::from_polar(1.0, step * x))
            .collect();
        let mut z: Vec<Complex64> = vec![Complex64::new(1.0, 0.0); xs.len()];
        for j in 0..n {
            if j % 256 == 0 {
                let xi = j as f64 * step;
                for (zk, &x) in z.iter_mut().zip(&xs) {
                    *zk = Complex64::from_polar(1.0, xi * x);
                }
            }
            let (mut a0, mut a1, mut a2) = (0.0, 0.0, 0.0);
            for k in 0..xs.len() {
                let (c, sn) = (z[k].re, z[k].im);
                let wx = ws[k] * xs[k];
                a0 += ws[k] * c;
                a1 += wx * sn;
                a2 += wx * xs[k] * c;
            }
            g0[j] = 2.0 * a0;
            g1[j] = -2.0 * a1;
            g2[j] = -2.0 * a2;
            for (zk, r) in z.iter_mut().zip(&rot) {
                *zk *= r;
            }
        }
        [g0, g1, g2]
    }

    pub fn profile(&self) -> &BumpProfile {
        &self.profile
    }

    pub fn xi_max(&self) -> f64 {
        self.xi_max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    /// Largest per-node discrepancy between the two tabulation rules.
    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn envelope_coefficients(&self) -> [f64; 2] {
        self.envelope
    }

    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.values.len()).map(move |j| j as f64 * self.step)
    }

    /// `g(0) = ∫ ǧ`.
    pub fn g0(&self) -> f64 {
        self.values[0]
    }

    /// Interpolated `g(ξ)`; off-table arguments fall back to direct quadrature.
    pub fn eval(&self, xi: f64) -> f64 {
        let x = xi.abs();
        if x > self.xi_max {
            return self.profile.fourier(x, 1e-15).map(|c| c.re).unwrap_or(0.0);
        }
        let pos = x / self.step;
        let j = (pos as usize).min(self.values.len() - 2);
        let t = pos - j as f64;
        let h = self.step;
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        let h3 = 10.0 * t3 - 15.0 * t4 + 6.0 * t5;
        let h0 = 1.0 - h3;
        let h1 = t - 6.0 * t3 + 8.0 * t4 - 3.0 * t5;
        let h2 = 0.5 * (t2 - 3.0 * t3 + 3.0 * t4 - t5);
        let h4 = -4.0 * t3 + 7.0 * t4 - 3.0 * t5;
        let h5 = 0.5 * (t3 - 2.0 * t4 + t5);
        self.values[j] * h0
            + h * self.d1[j] * h1
            + h * h * self.d2[j] * h2
            + self.values[j + 1] * h3
            + h * self.d1[j + 1] * h4
            + h * h * self.d2[j + 1] * h5
    }

    /// Pointwise bound on `|g(ξ)|` for `|ξ| >= x` (monotone in `x`).
    pub fn decay_bound(&self, x: f64) -> f64 {
        let x = x.abs();
        let [a, b] = self.envelope;
        if x >= self.xi_max {
            return a * (-b * x.sqrt()).exp();
        }
        self.suffix_max[(x / self.step) as usize]
    }

    /// Bound on `∫_{|η| > L} |g(η)| dη`.
    pub fn tail_integral(&self, l: f64) -> f64 {
        let l = l.abs();
        if l >= self.xi_max {
            let [a, b] = self.envelope;
            if b <= 0.0 {
                return f64::INFINITY;
            }
            let s = l.sqrt();
            return 2.0 * a * 2.0 * (b * s + 1.0) * (-b * s).exp() / (b * b);
        }
        let j = (l / self.step) as usize;
        2.0 * self.tail[j]
    }

    /// Smallest tabulated `L` with `∫_{|η|>L} |g| <= budget`; `None` when even
    /// the full table does not certify the truncation.
    pub fn effective_support(&self, budget: f64) -> Option<f64> {
        if 2.0 * self.tail[self.tail.len() - 1] > budget {
            return None;
        }
        // tail is non-increasing: binary search
        let (mut lo, mut hi) = (0usize, self.tail.len() - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if 2.0 * self.tail[mid] <= budget {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Some((lo as f64 * self.step).max(self.step))
    }

    /// Effective support, or the whole table with the uncovered tail mass.
    pub fn support_for(&self, budget: f64) -> (f64, f64) {
        match self.effective_support(budget) {
            Some(l) => (l, self.tail_integral(l)),
            None => (self.xi_max, self.tail_integral(self.xi_max)),
        }
    }

    /// Writes `xi, re, im, est_err`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "xi,re,im,est_err")?;
        for (j, xi) in self.grid().enumerate() {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e}",
                xi, self.values[j], 0.0, self.est_err[j]
            )?;
        }
        Ok(())
    }
}

/// `ψ̂(ξ) = c ǧ(ξ/r)` on `(-r, r)` with `ψ(0) = 1`.
#[derive(Clone, Copy, Debug)]
pub struct FrequencyBump {
    pub radius: f64,
    pub normalization: f64,
    profile: BumpProfile,
}

impl FrequencyBump {
    /// Bump for dimension `n >= 2`; `g0 = ∫ ǧ`.
    pub fn new(n: usize, g0: f64) -> Result<Self> {
        if n < 2 {
            return Err(LabError::InvalidParameter(format!(
                "frequency bump needs n >= 2, got {n}"
            )));
        }
        let radius = 1.0 / ((n - 1) as f64).sqrt();
        Ok(Self {
            radius,
            normalization: 2.0 * PI / (g0 * radius),
            profile: BumpProfile::default(),
        })
    }

    pub fn standard(n: usize) -> Result<Self> {
        Self::new(n, FourierTable::standard().g0())
    }

    #[inline]
    pub fn eval_hat(&self, xi: f64) -> f64 {
        self.normalization * self.profile.eval(xi / self.radius)
    }

    pub fn breakpoints(&self) -> [f64; 2] {
        let p = self.profile.plateau_half_width * self.radius;
        [-p, p]
    }

    /// `ψ(y) = (2π)^{-1} ∫ e^{iξy} ψ̂(ξ) dξ` by quadrature.
    pub fn psi_eval(&self, y: f64, spec: &QuadratureSpec) -> Result<Complex64> {
        let r = self.radius;
        let phase = QuadraticPhase::from_f64(0.0, y, 0.0);
        let est = integrate_chirp(
            |xi| Complex64::new(self.eval_hat(xi), 0.0),
            &phase,
            -r,
            r,
            &self.breakpoints(),
            r / 8.0,
            spec,
            "psi_eval",
        )?;
        Ok(est.value / (2.0 * PI))
    }

    /// `ψ(y) = g(r y) / g(0)` through the table.
    #[inline]
    pub fn psi_fast(&self, y: f64, table: &FourierTable) -> f64 {
        table.eval(self.radius * y) / table.g0()
    }

    /// `Φ(x') = Π ψ(x_j)`.
    pub fn phi_eval(&self, xprime: &[f64], spec: &QuadratureSpec) -> Result<Complex64> {
        let mut acc = Complex64::new(1.0, 0.0);
        for &x in xprime {
            acc *= self.psi_eval(x, spec)?;
        }
        Ok(acc)
    }

    /// `∫ |ψ̂|^p` for p = 1, 2.
    pub fn hat_lp_power(&self, p: i32) -> f64 {
        self.normalization.powi(p) * self.radius * self.profile.lp_power(p)
    }

    /// `∫_{|y|>Y} |ψ|` from the tail of `g`.
    pub fn psi_tail_l1(&self, y: f64, table: &FourierTable) -> f64 {
        table.tail_integral(self.radius * y) / (self.radius * table.g0())
    }

    /// Pointwise bound on `|ψ(y)|` for `|y| >= Y`.
    pub fn psi_decay_bound(&self, y: f64, table: &FourierTable) -> f64 {
        table.decay_bound(self.radius * y) / table.g0()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_and_support_are_exact() {
        assert_eq!(bump_eval(0.25), 1.0);
        assert_eq!(bump_eval(0.5), 1.0);
        assert_eq!(bump_eval(-0.5), 1.0);
        assert_eq!(bump_eval(1.0), 0.0);
        assert_eq!(bump_eval(1.5), 0.0);
        let v = bump_eval(0.75);
        assert!(v > 0.0 && v < 1.0);
        assert_eq!(v, bump_eval(-0.75));
        // σ(t) + σ(1-t) = 1 puts the midpoint of the band at exactly 1/2
        assert!((v - 0.5).abs() < 1e-15);
    }

    #[test]
    fn g_at_zero_is_three_halves() {
        // plateau contributes 1, the two bands contribute ∫_0^1 σ = 1/2
        let g0 = bump_fourier(0.0, 1e-13).unwrap();
        assert!((g0.re - 1.5).abs() < 1e-12);
        assert!(g0.im.abs() < 1e-13);
        assert!((FourierTable::standard().g0() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn table_tracks_direct_quadrature() {
        let t = FourierTable::standard();
        for &xi in &[0.03, 1.0, 2.5, 7.77, 40.0, 123.456, 511.9, 1000.1] {
            let direct = bump_fourier(xi, 1e-14).unwrap().re;
            assert!(
                (t.eval(xi) - direct).abs() < 1e-12,
                "xi={xi}: {} vs {}",
                t.eval(xi),
                direct
            );
        }
    }

    #[test]
    fn envelope_bounds_the_table() {
        let t = FourierTable::standard();
        for x in [10.0, 100.0, 500.0, 900.0] {
            let b = t.decay_bound(x);
            for k in 0..200 {
                let xi = x + k as f64 * 0.37;
                assert!(t.eval(xi).abs() <= b * (1.0 + 1e-9), "{xi}");
            }
        }
        let l = t.effective_support(1e-9).unwrap();
        assert!(l > 50.0 && l < t.xi_max());
        assert!(t.tail_integral(l) <= 1e-9);
    }

    #[test]
    fn psi_normalized_and_matches_table() {
        let fb = FrequencyBump::standard(2).unwrap();
        let spec = QuadratureSpec::new(1e-13, 1e-15);
        let p0 = fb.psi_eval(0.0, &spec).unwrap();
        assert!((p0.re - 1.0).abs() < 1e-12 && p0.im.abs() < 1e-12);
        let t = FourierTable::standard();
        for &y in &[0.3, -2.0, 17.5, 250.0] {
            let q = fb.psi_eval(y, &spec).unwrap();
            assert!((q.re - fb.psi_fast(y, t)).abs() < 1e-11, "y={y}");
        }
        let fb3 = FrequencyBump::standard(3).unwrap();
        let phi0 = fb3.phi_eval(&[0.0, 0.0], &spec).unwrap();
        assert!((phi0.re - 1.0).abs() < 2e-12);
    }

    #[test]
    fn frequency_bump_support_inside_unit_ball() {
        for n in 2..6 {
            let fb = FrequencyBump::standard(n).unwrap();
            assert_eq!(fb.eval_hat(fb.radius), 0.0);
            assert!(fb.radius * ((n - 1) as f64).sqrt() <= 1.0 + 1e-15);
        }
        assert!(FrequencyBump::standard(1).is_err());
    }
}
