//! Adaptive quadrature for chirped integrands `∫ A(s) e^{iφ(s)} ds` with a
//! quadratic phase `φ`.
//!
//! Each panel is integrated either by Gauss–Legendre (when the local phase
//! varies slowly) or by Levin collocation (when the phase derivative is
//! bounded away from zero, so the cost no longer grows with the frequency).
//! The error estimate of a panel is the difference between the panel rule
//! and the same rule applied to its two halves; panels are refined
//! largest-error-first until the global target is met.

use crate::error::{LabError, Result};
use crate::phase::QuadraticPhase;
use num_complex::Complex64;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::sync::OnceLock;

const GL_ORDER: usize = 16;
const LEVIN_NODES: usize = 16;
/// Max local phase derivative (radians per half-width) for a Gauss panel.
const GL_MAX_SLOPE: f64 = 6.0;
/// Min local phase derivative for a Levin panel.
const LEVIN_MIN_SLOPE: f64 = 3.0;

/// Tolerances and budget for one integral.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureSpec {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_panels: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rel_tol: 1e-10,
            abs_tol: 1e-13,
            max_panels: 1 << 20,
        }
    }
}

impl QuadratureSpec {
    pub fn new(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0) || !(self.abs_tol >= 0.0) || self.max_panels < 1 {
            return Err(LabError::InvalidParameter(format!(
                "quadrature spec needs rel_tol > 0, abs_tol >= 0, budget >= 1 (got {:?})",
                self
            )));
        }
        Ok(())
    }

    /// Same budget, tolerances scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rel_tol: self.rel_tol * factor,
            abs_tol: self.abs_tol * factor,
            max_panels: self.max_panels,
        }
    }

    pub fn target(&self, value: f64) -> f64 {
        self.abs_tol.max(self.rel_tol * value)
    }
}

/// Integral value with an a-posteriori error estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: Complex64,
    pub est_error: f64,
    pub panels: usize,
}

impl Estimate {
    pub const ZERO: Self = Self {
        value: Complex64 { re: 0.0, im: 0.0 },
        est_error: 0.0,
        panels: 0,
    };
}

pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
    pub fn new(n: usize) -> Self {
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn order16() -> &'static GaussLegendre {
        static GL: OnceLock<GaussLegendre> = OnceLock::new();
        GL.get_or_init(|| GaussLegendre::new(GL_ORDER))
    }

    /// Plain rule for a real integrand on `[a, b]`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, a: f64, b: f64) -> f64 {
        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * f(c + h * x))
            .sum::<f64>()
            * h
    }
}

fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Chebyshev–Lobatto points `cos(jπ/(m-1))` and the spectral
/// differentiation matrix (row-major).
struct Chebyshev {
    points: Vec<f64>,
    diff: Vec<f64>,
}

impl Chebyshev {
    fn new(m: usize) -> Self {
        let n = m - 1;
        let points: Vec<f64> = (0..m).map(|j| (PI * j as f64 / n as f64).cos()).collect();
        let c = |j: usize| -> f64 {
            let e = if j == 0 || j == n { 2.0 } else { 1.0 };
            if j.is_multiple_of(2) {
                e
            } else {
                -e
            }
        };
        let mut diff = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    diff[i * m + j] = c(i) / c(j) / (points[i] - points[j]);
                }
            }
        }
        // negative-sum trick for the diagonal
        for i in 0..m {
            let s: f64 = (0..m).filter(|&j| j != i).map(|j| diff[i * m + j]).sum();
            diff[i * m + i] = -s;
        }
        Self { points, diff }
    }

    fn get() -> &'static Chebyshev {
        static CH: OnceLock<Chebyshev> = OnceLock::new();
        CH.get_or_init(|| Chebyshev::new(LEVIN_NODES))
    }
}

/// Gaussian elimination with partial pivoting; `a` is row-major `m x m`.
fn solve_complex(a: &mut [Complex64], b: &mut [Complex64], m: usize) -> Option<()> {
    for col in 0..m {
        let mut piv = col;
        let mut best = a[col * m + col].norm_sqr();
        for r in col + 1..m {
            let v = a[r * m + col].norm_sqr();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return None;
        }
        if piv != col {
            for k in 0..m {
                a.swap(col * m + k, piv * m + k);
            }
            b.swap(col, piv);
        }
        let inv = 1.0 / a[col * m + col];
        for r in col + 1..m {
            let f = a[r * m + col] * inv;
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            for k in col..m {
                let v = a[col * m + k];
                a[r * m + k] -= f * v;
            }
            let v = b[col];
            b[r] -= f * v;
        }
    }
    for r in (0..m).rev() {
        let mut s = b[r];
        for k in r + 1..m {
            s -= a[r * m + k] * b[k];
        }
        b[r] = s / a[r * m + r];
    }
    Some(())
}

#[inline]
fn cis(x: f64) -> Complex64 {
    let (s, c) = x.sin_cos();
    Complex64::new(c, s)
}

/// One-panel rule. Returns `None` when the panel is too oscillatory for
/// Gauss–Legendre yet has a (near-)stationary point, so it must be split.
fn panel_rule<A: Fn(f64) -> Complex64>(
    amp: &A,
    phase: &QuadraticPhase,
    lo: f64,
    hi: f64,
) -> Option<Complex64> {
    let c = 0.5 * (lo + hi);
    let h = 0.5 * (hi - lo);
    let (phi0, slope, c2) = phase.localize(c);
    let b1 = slope * h;
    let b2 = c2 * h * h;
    let d_left = b1 - 2.0 * b2;
    let d_right = b1 + 2.0 * b2;
    let max_d = d_left.abs().max(d_right.abs());
    if max_d <= GL_MAX_SLOPE {
        let gl = GaussLegendre::order16();
        let mut acc = Complex64::new(0.0, 0.0);
        for (&u, &w) in gl.nodes.iter().zip(&gl.weights) {
            let a = amp(c + h * u);
            if a.re == 0.0 && a.im == 0.0 {
                continue;
            }
            acc += a * cis(phi0 + u * (b1 + b2 * u)) * w;
        }
        return Some(acc * h);
    }
    let min_d = if d_left.signum() == d_right.signum() {
        d_left.abs().min(d_right.abs())
    } else {
        0.0
    };
    if min_d < LEVIN_MIN_SLOPE {
        return None;
    }
    let ch = Chebyshev::get();
    let m = LEVIN_NODES;
    let mut mat = [Complex64::new(0.0, 0.0); LEVIN_NODES * LEVIN_NODES];
    let mut rhs = [Complex64::new(0.0, 0.0); LEVIN_NODES];
    let mut all_zero = true;
    for i in 0..m {
        let u = ch.points[i];
        for j in 0..m {
            mat[i * m + j] = Complex64::new(ch.diff[i * m + j], 0.0);
        }
        mat[i * m + i] += Complex64::new(0.0, b1 + 2.0 * b2 * u);
        let a = amp(c + h * u);
        if a.re != 0.0 || a.im != 0.0 {
            all_zero = false;
        }
        rhs[i] = a * h;
    }
    if all_zero {
        return Some(Complex64::new(0.0, 0.0));
    }
    solve_complex(&mut mat, &mut rhs, m)?;
    // points[0] = +1, points[m-1] = -1
    let right = rhs[0] * cis(phi0 + b1 + b2);
    let left = rhs[m - 1] * cis(phi0 - b1 + b2);
    Some(right - left)
}

struct Panel {
    lo: f64,
    hi: f64,
    value: Complex64,
    err: f64,
    halves: Option<[Complex64; 2]>,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.err.partial_cmp(&other.err).unwrap_or(Ordering::Equal)
    }
}

fn evaluate_panel<A: Fn(f64) -> Complex64>(
    amp: &A,
    phase: &QuadraticPhase,
    lo: f64,
    hi: f64,
    coarse: Option<Complex64>,
) -> Panel {
    let mid = 0.5 * (lo + hi);
    let coarse = coarse.or_else(|| panel_rule(amp, phase, lo, hi));
    let left = panel_rule(amp, phase, lo, mid);
    let right = panel_rule(amp, phase, mid, hi);
    match (coarse, left, right) {
        (Some(c), Some(l), Some(r)) => {
            let fine = l + r;
            let mut err = (fine - c).norm();
            if !err.is_finite() {
                err = f64::INFINITY;
            }
            Panel {
                lo,
                hi,
                value: fine,
                err,
                halves: Some([l, r]),
            }
        }
        (_, l, r) => Panel {
            lo,
            hi,
            value: l.unwrap_or_default() + r.unwrap_or_default(),
            err: f64::INFINITY,
            halves: match (l, r) {
                (Some(l), Some(r)) => Some([l, r]),
                _ => None,
            },
        },
    }
}

/// Initial partition of `[a, b]`: user breakpoints, the stationary point of
/// the phase, and panels no wider than `max_width`.
fn initial_partition(
    a: f64,
    b: f64,
    breakpoints: &[f64],
    phase: &QuadraticPhase,
    max_width: f64,
) -> Vec<f64> {
    let mut cuts: Vec<f64> = vec![a, b];
    cuts.extend(breakpoints.iter().copied().filter(|&x| x > a && x < b));
    if let Some(s) = phase.stationary_point() {
        if s > a && s < b {
            cuts.push(s);
        }
    }
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();
    let mut out = vec![cuts[0]];
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let pieces = if max_width.is_finite() && max_width > 0.0 {
            ((hi - lo) / max_width).ceil().clamp(1.0, 1e7) as usize
        } else {
            1
        };
        for k in 1..=pieces {
            out.push(lo + (hi - lo) * k as f64 / pieces as f64);
        }
    }
    out
}

/// Adaptive integral of `amp(s) * exp(i phase(s))` over `[a, b]`.
///
/// `max_width` is the widest panel on which `amp` is well resolved by a
/// 16-point rule; `breakpoints` mark kinks or support edges of `amp`.
#[allow(clippy::too_many_arguments)]
pub fn integrate_chirp<A: Fn(f64) -> Complex64>(
    amp: A,
    phase: &QuadraticPhase,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    max_width: f64,
    spec: &QuadratureSpec,
    operation: &str,
) -> Result<Estimate> {
    spec.validate()?;
    if !(a.is_finite() && b.is_finite()) {
        return Err(LabError::InvalidParameter(format!(
            "{operation}: non-finite bounds"
        )));
    }
    if a == b {
        return Ok(Estimate::ZERO);
    }
    if a > b {
        let mut e = integrate_chirp(amp, phase, b, a, breakpoints, max_width, spec, operation)?;
        e.value = -e.value;
        return Ok(e);
    }
    phase.check_ceiling(a, b, operation)?;

    let cuts = initial_partition(a, b, breakpoints, phase, max_width);
    let mut heap = BinaryHeap::with_capacity(cuts.len());
    let mut total = Complex64::new(0.0, 0.0);
    let mut total_err = 0.0;
    for w in cuts.windows(2) {
        let p = evaluate_panel(&amp, phase, w[0], w[1], None);
        total += p.value;
        total_err += p.err;
        heap.push(p);
    }
    let mut panels = heap.len();
    let mut resum_counter = 0usize;
    loop {
        if total_err <= spec.target(total.norm()) {
            break;
        }
        if panels >= spec.max_panels {
            return Err(LabError::Nonconvergence {
                operation: operation.to_string(),
                best_re: total.re,
                best_im: total.im,
                est_error: total_err,
                panels,
            });
        }
        let Some(worst) = heap.pop() else { break };
        let mid = 0.5 * (worst.lo + worst.hi);
        if !(mid > worst.lo && mid < worst.hi) {
            // cannot split further in floating point
            return Err(LabError::Nonconvergence {
                operation: operation.to_string(),
                best_re: total.re,
                best_im: total.im,
                est_error: total_err,
                panels,
            });
        }
        let (cl, cr) = match worst.halves {
            Some([l, r]) => (Some(l), Some(r)),
            None => (None, None),
        };
        let left = evaluate_panel(&amp, phase, worst.lo, mid, cl);
        let right = evaluate_panel(&amp, phase, mid, worst.hi, cr);
        total += left.value + right.value - worst.value;
        if worst.err.is_finite() {
            total_err += left.err + right.err - worst.err;
        } else {
            total_err = f64::NAN;
        }
        heap.push(left);
        heap.push(right);
        panels += 1;
        resum_counter += 1;
        // resum to wash out accumulated rounding and infinities
        if !total_err.is_finite() || resum_counter >= 4096 {
            resum_counter = 0;
            total = heap.iter().map(|p| p.value).sum();
            total_err = heap.iter().map(|p| p.err).sum();
        }
    }
    Ok(Estimate {
        value: total,
        est_error: total_err.max(0.0),
        panels,
    })
}

/// Adaptive integral of a smooth complex integrand (no phase factor).
pub fn integrate_smooth<F: Fn(f64) -> Complex64>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    max_width: f64,
    spec: &QuadratureSpec,
    operation: &str,
) -> Result<Estimate> {
    integrate_chirp(
        f,
        &QuadraticPhase::default(),
        a,
        b,
        breakpoints,
        max_width,
        spec,
        operation,
    )
}

/// Adaptive integral of a smooth real integrand.
pub fn integrate_real<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breakpoints: &[f64],
    max_width: f64,
    spec: &QuadratureSpec,
    operation: &str,
) -> Result<(f64, f64)> {
    let e = integrate_smooth(
        |x| Complex64::new(f(x), 0.0),
        a,
        b,
        breakpoints,
        max_width,
        spec,
        operation,
    )?;
    Ok((e.value.re, e.est_error))
}
