//! Schrödinger means `S_t f(x) = ∫ e^{iξ·x} e^{it|ξ|²} f̂(ξ) dξ` of the
//! construction, by three independent routes:
//!
//! * semi-analytic: `S_t f_v` after the substitution `η = v(ξ + R)`, and
//!   `S_t G_v` reduced to a lattice sum of `S_t ψ` at shifted points;
//! * direct oracle: the frequency integral over the band where `f̂` lives;
//! * kernel convolution: `∫ K_t(x - y) f(y) dy` over the physical support.
//!
//! Large phases (`D l x`, `t D² l²`, `t R²`) are formed in double-double and
//! reduced modulo 2π; anything beyond [`PHASE_CEILING`] fails loudly.

use crate::construction::{Point, Schedule, Stage};
use crate::error::{LabError, Result};
use crate::phase::{DoubleDouble, PhaseAccumulator, QuadraticPhase, PHASE_CEILING};
use crate::profiles::{bump_eval, FourierTable, FrequencyBump};
use crate::quad::{integrate_chirp, Estimate, GaussLegendre, QuadratureSpec};
use num_complex::Complex64;
use serde::Serialize;
use std::cell::RefCell;
use std::f64::consts::PI;
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    SemiAnalytic,
    DirectOracle,
    KernelConvolution,
    /// Upper bound on the modulus only; `value` carries the bound.
    Majorant,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::SemiAnalytic => "semi_analytic",
            EvalMode::DirectOracle => "direct_oracle",
            EvalMode::KernelConvolution => "kernel_convolution",
            EvalMode::Majorant => "majorant",
        }
    }
}

/// A value of `S_t(·)` with an a-posteriori error estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub value: Complex64,
    pub est_error: f64,
    pub mode: EvalMode,
}

impl EvalResult {
    fn from_estimate(e: Estimate, mode: EvalMode) -> Self {
        Self {
            value: e.value,
            est_error: e.est_error,
            mode,
        }
    }

    pub fn abs(&self) -> f64 {
        self.value.norm()
    }

    /// Largest modulus compatible with the estimate.
    pub fn abs_upper(&self) -> f64 {
        self.value.norm() + self.est_error
    }

    pub fn is_exact(&self) -> bool {
        self.mode != EvalMode::Majorant
    }

    /// Product with error propagation `|a|δb + |b|δa + δaδb`.
    pub fn times(&self, other: &EvalResult) -> EvalResult {
        let mode = if self.is_exact() && other.is_exact() {
            if self.mode == other.mode {
                self.mode
            } else {
                EvalMode::SemiAnalytic
            }
        } else {
            EvalMode::Majorant
        };
        let value = if mode == EvalMode::Majorant {
            Complex64::new(self.abs() * other.abs(), 0.0)
        } else {
            self.value * other.value
        };
        EvalResult {
            value,
            est_error: self.abs() * other.est_error
                + other.abs() * self.est_error
                + self.est_error * other.est_error,
            mode,
        }
    }
}

#[inline]
fn cis(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}

// ---------------------------------------------------------------------------
// generic routes

/// Direct frequency-side quadrature of `∫ e^{iξx} e^{itξ²} f̂(ξ) dξ` over a
/// bounded band.
pub fn schrodinger_mean_fhat<F: Fn(f64) -> Complex64>(
    fhat: F,
    band: (f64, f64),
    breakpoints: &[f64],
    max_width: f64,
    t: f64,
    x: f64,
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    let phase = QuadraticPhase::from_f64(0.0, x, t);
    let e = integrate_chirp(
        fhat,
        &phase,
        band.0,
        band.1,
        breakpoints,
        max_width,
        spec,
        "schrodinger_mean_fhat",
    )?;
    Ok(EvalResult::from_estimate(e, EvalMode::DirectOracle))
}

/// Box of integration for one frequency axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisBand {
    pub lo: f64,
    pub hi: f64,
    pub breakpoints: Vec<f64>,
    pub max_width: f64,
}

/// Nested version of [`schrodinger_mean_fhat`] over a product of bands.
pub fn schrodinger_mean_fhat_nd(
    fhat: &dyn Fn(&[f64]) -> Complex64,
    bands: &[AxisBand],
    t: f64,
    x: &[f64],
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    if bands.is_empty() || bands.len() != x.len() {
        return Err(LabError::InvalidParameter(format!(
            "{} bands for a {}-dimensional point",
            bands.len(),
            x.len()
        )));
    }
    let prefix = RefCell::new(Vec::with_capacity(x.len()));
    let e = nested_axis(fhat, bands, t, x, spec, &prefix)?;
    Ok(EvalResult::from_estimate(e, EvalMode::DirectOracle))
}

fn nested_axis(
    fhat: &dyn Fn(&[f64]) -> Complex64,
    bands: &[AxisBand],
    t: f64,
    x: &[f64],
    spec: &QuadratureSpec,
    prefix: &RefCell<Vec<f64>>,
) -> Result<Estimate> {
    let j = prefix.borrow().len();
    let band = &bands[j];
    let last = j + 1 == bands.len();
    let failure: RefCell<Option<LabError>> = RefCell::new(None);
    let inner_err = RefCell::new(0.0f64);
    let amp = |xi: f64| -> Complex64 {
        prefix.borrow_mut().push(xi);
        let v = if last {
            let p = prefix.borrow();
            fhat(&p)
        } else {
            match nested_axis(fhat, bands, t, x, spec, prefix) {
                Ok(e) => {
                    let mut m = inner_err.borrow_mut();
                    *m = m.max(e.est_error);
                    e.value
                }
                Err(err) => {
                    failure.borrow_mut().get_or_insert(err);
                    Complex64::new(0.0, 0.0)
                }
            }
        };
        prefix.borrow_mut().pop();
        v
    };
    let phase = QuadraticPhase::from_f64(0.0, x[j], t);
    let mut e = integrate_chirp(
        amp,
        &phase,
        band.lo,
        band.hi,
        &band.breakpoints,
        band.max_width,
        spec,
        "schrodinger_mean_fhat",
    )?;
    if let Some(err) = failure.into_inner() {
        return Err(err);
    }
    e.est_error += inner_err.into_inner() * (band.hi - band.lo);
    Ok(e)
}

/// `K_t(y) = (π/|t|)^{n/2} e^{±inπ/4} e^{-i|y|²/(4t)}`, upper sign for `t > 0`.
pub fn kernel_k_t(t: f64, y: &[f64]) -> Result<Complex64> {
    if t == 0.0 {
        return Err(LabError::DomainError);
    }
    let n = y.len() as f64;
    let mut r2 = DoubleDouble::ZERO;
    for &yj in y {
        r2 = r2 + DoubleDouble::product(yj, yj);
    }
    let mut acc = PhaseAccumulator::new();
    acc.add_dd(-(r2 * DoubleDouble::recip(4.0 * t)));
    acc.add(t.signum() * n * PI / 4.0);
    acc.check_ceiling("kernel_K_t")?;
    let (h, l) = acc.reduced();
    Ok(cis(h + l) * (PI / t.abs()).powf(n / 2.0))
}

/// A compactly supported one-dimensional function `amp(y) e^{i carrier y}`.
pub struct CompactFunction<'a> {
    pub amp: &'a dyn Fn(f64) -> Complex64,
    pub support: (f64, f64),
    pub breakpoints: Vec<f64>,
    /// Linear frequency factored out of `amp` so the quadrature sees it as phase.
    pub carrier: f64,
    /// Panel width on which `amp` is resolved by a 16-point rule.
    pub max_width: f64,
}

/// `∫ K_t(x - y) f(y) dy` over the support of `f`.
pub fn propagate_by_kernel(
    f: &CompactFunction,
    t: f64,
    x: f64,
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    if t == 0.0 {
        return Err(LabError::DomainError);
    }
    let q = DoubleDouble::recip(4.0 * t);
    // -(x - y)²/(4t) + carrier y
    let c2 = -q;
    let c1 = q.mul_f64(2.0 * x) + DoubleDouble::from_f64(f.carrier);
    let c0 = -(q * DoubleDouble::product(x, x));
    let phase = QuadraticPhase::new(c0, c1, c2);
    let e = integrate_chirp(
        f.amp,
        &phase,
        f.support.0,
        f.support.1,
        &f.breakpoints,
        f.max_width,
        spec,
        "propagate_by_kernel",
    )?;
    let k = cis(t.signum() * PI / 4.0) * (PI / t.abs()).sqrt();
    Ok(EvalResult {
        value: e.value * k,
        est_error: e.est_error * k.norm(),
        mode: EvalMode::KernelConvolution,
    })
}

// ---------------------------------------------------------------------------
// f_v

/// Truncation `L` of the `g` integral and the certified tail mass beyond it.
fn g_truncation(spec: &QuadratureSpec) -> (f64, f64) {
    FourierTable::standard().support_for(0.1 * spec.abs_tol)
}

/// Semi-analytic `S_t f_v(x_1) = ∫ e^{iφ(η)} g(η) dη`: the substitution
/// `ξ = η/v - R` turns `xξ + tξ²` into a quadratic `φ` in `η`.
pub fn propagate_f_v(stage: &Stage, t: f64, x1: f64, spec: &QuadratureSpec) -> Result<EvalResult> {
    let table = FourierTable::standard();
    let w = 1.0 / stage.v;
    let r = stage.r;
    // t ξ² + x ξ with ξ = w η - R
    let tr = DoubleDouble::product(t, r);
    let c2 = DoubleDouble::product(w, w).mul_f64(t);
    let c1 = (DoubleDouble::from_f64(x1) - tr.mul_f64(2.0)).mul_f64(w);
    let c0 = tr.mul_f64(r) - DoubleDouble::product(x1, r);
    let phase = QuadraticPhase::new(c0, c1, c2);
    let (l, tail) = g_truncation(spec);
    let e = integrate_chirp(
        |eta| Complex64::new(table.eval(eta), 0.0),
        &phase,
        -l,
        l,
        &[],
        4.0,
        spec,
        "propagate_f_v",
    )?;
    Ok(EvalResult {
        value: e.value,
        est_error: e.est_error + tail,
        mode: EvalMode::SemiAnalytic,
    })
}

/// Band quadrature of the untransformed frequency integral of `f_v`.
pub fn propagate_f_v_direct(
    stage: &Stage,
    t: f64,
    x1: f64,
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    let table = FourierTable::standard();
    let (l, tail) = g_truncation(spec);
    let w = 1.0 / stage.v;
    let band = (-stage.r - l * w, -stage.r + l * w);
    let v = stage.v;
    let r = stage.r;
    let mut e = schrodinger_mean_fhat(
        |xi| Complex64::new(v * table.eval(v * (xi + r)), 0.0),
        band,
        &[-r],
        4.0 * w,
        t,
        x1,
        spec,
    )?;
    e.est_error += tail;
    Ok(e)
}

/// `S_t f_v` by convolution with the kernel over `(-v, v)`.
pub fn propagate_f_v_kernel(
    stage: &Stage,
    t: f64,
    x1: f64,
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    let v = stage.v;
    let amp = move |y: f64| Complex64::new(bump_eval(y / v), 0.0);
    let f = CompactFunction {
        amp: &amp,
        support: (-v, v),
        breakpoints: vec![-0.5 * v, 0.5 * v],
        carrier: -stage.r,
        max_width: v / 8.0,
    };
    propagate_by_kernel(&f, t, x1, spec)
}

/// Raw phase magnitude of the kernel route for `f_v`.
fn kernel_phase_magnitude(stage: &Stage, t: f64, x1: f64) -> f64 {
    let v = stage.v;
    let q = 1.0 / (4.0 * t.abs());
    (x1.abs() + v).powi(2) * q + stage.r * v
}

/// Kernel route when it is defined and cheap, semi-analytic otherwise.
pub fn propagate_f_v_auto(
    stage: &Stage,
    t: f64,
    x1: f64,
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    if t != 0.0 && kernel_phase_magnitude(stage, t, x1) <= PHASE_CEILING {
        match propagate_f_v_kernel(stage, t, x1, spec) {
            Ok(r) => return Ok(r),
            Err(LabError::PrecisionLoss { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    propagate_f_v(stage, t, x1, spec)
}

// ---------------------------------------------------------------------------
// ψ, Φ

/// `S_t ψ(y) = ∫_{-r}^{r} e^{iξy + itξ²} ψ̂(ξ) dξ`.
pub fn propagate_psi(
    bump: &FrequencyBump,
    t: f64,
    y: f64,
    spec: &QuadratureSpec,
) -> Result<Estimate> {
    let r = bump.radius;
    let phase = QuadraticPhase::from_f64(0.0, y, t);
    integrate_chirp(
        |xi| Complex64::new(bump.eval_hat(xi), 0.0),
        &phase,
        -r,
        r,
        &bump.breakpoints(),
        r / 4.0,
        spec,
        "propagate_psi",
    )
}

/// `S_t Φ(y') = Π_j S_t ψ(y_j)`.
pub fn propagate_phi(
    n: usize,
    t: f64,
    yprime: &[f64],
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    if yprime.len() + 1 != n {
        return Err(LabError::InvalidParameter(format!(
            "y' needs {} coordinates for n = {n}",
            n - 1
        )));
    }
    let bump = FrequencyBump::standard(n)?;
    let mut acc = EvalResult {
        value: Complex64::new(1.0, 0.0),
        est_error: 0.0,
        mode: EvalMode::SemiAnalytic,
    };
    for &y in yprime {
        let e = propagate_psi(&bump, t, y, spec)?;
        acc = acc.times(&EvalResult::from_estimate(e, EvalMode::SemiAnalytic));
    }
    Ok(acc)
}

/// Composite Gauss rule on `[-r, r]` cut at the plateau edges, `m` panels
/// per piece.
fn psi_rule(bump: &FrequencyBump, t: f64, m: usize) -> (Vec<f64>, Vec<Complex64>) {
    let gl = GaussLegendre::order16();
    let r = bump.radius;
    let cuts = [-r, -0.5 * r, 0.5 * r, r];
    let mut nodes = Vec::with_capacity(3 * m * gl.nodes.len());
    let mut base = Vec::with_capacity(nodes.capacity());
    for w in cuts.windows(2) {
        let step = (w[1] - w[0]) / m as f64;
        for p in 0..m {
            let lo = w[0] + step * p as f64;
            let c = lo + 0.5 * step;
            let h = 0.5 * step;
            for (&u, &wt) in gl.nodes.iter().zip(&gl.weights) {
                let xi = c + h * u;
                let a = bump.eval_hat(xi) * wt * h;
                if a != 0.0 {
                    nodes.push(xi);
                    base.push(cis(t * xi * xi) * a);
                }
            }
        }
    }
    (nodes, base)
}

/// `S_t ψ(y0 + j dy)` for `j < count` by rotating a fixed rule.
fn sweep_rule(nodes: &[f64], base: &[Complex64], y0: f64, dy: f64, count: usize) -> Vec<Complex64> {
    const RESYNC: usize = 32;
    let rot: Vec<Complex64> = nodes.iter().map(|&xi| cis(xi * dy)).collect();
    let mut cur: Vec<Complex64> = Vec::with_capacity(nodes.len());
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        if j % RESYNC == 0 {
            let y = y0 + dy * j as f64;
            cur.clear();
            cur.extend(nodes.iter().zip(base).map(|(&xi, &b)| b * cis(xi * y)));
        }
        out.push(cur.iter().sum());
        if (j + 1) % RESYNC != 0 {
            for (c, z) in cur.iter_mut().zip(&rot) {
                *c *= z;
            }
        }
    }
    out
}

const SWEEP_MAX_PANELS: usize = 256;

/// `S_t ψ` along an arithmetic progression of arguments. Uses a fixed
/// rule with a halving error estimate when it converges, adaptive
/// quadrature per point otherwise.
pub fn psi_sweep(
    bump: &FrequencyBump,
    t: f64,
    y0: f64,
    dy: f64,
    count: usize,
    spec: &QuadratureSpec,
) -> Result<Vec<Estimate>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let r = bump.radius;
    let ymax = y0.abs().max((y0 + dy * (count - 1) as f64).abs());
    let mut m = (((ymax + 2.0 * t.abs() * r) * r / 4.0).ceil() as usize).max(4);
    if m <= SWEEP_MAX_PANELS {
        let (n0, b0) = psi_rule(bump, t, m);
        let mut coarse = sweep_rule(&n0, &b0, y0, dy, count);
        while m <= SWEEP_MAX_PANELS {
            let (n1, b1) = psi_rule(bump, t, 2 * m);
            let fine = sweep_rule(&n1, &b1, y0, dy, count);
            let scale = fine.iter().map(|z| z.norm()).fold(0.0, f64::max);
            let target = spec.abs_tol.max(spec.rel_tol * scale);
            let errs: Vec<f64> = coarse
                .iter()
                .zip(&fine)
                .map(|(a, b)| (a - b).norm())
                .collect();
            if errs.iter().all(|&e| e <= target) {
                return Ok(fine
                    .into_iter()
                    .zip(errs)
                    .map(|(value, est_error)| Estimate {
                        value,
                        est_error,
                        panels: 6 * m,
                    })
                    .collect());
            }
            coarse = fine;
            m *= 2;
        }
    }
    (0..count)
        .map(|j| propagate_psi(bump, t, y0 + dy * j as f64, spec))
        .collect()
}

// ---------------------------------------------------------------------------
// G_v

fn check_xprime(stage: &Stage, xprime: &[f64]) -> Result<()> {
    if xprime.len() + 1 != stage.n {
        return Err(LabError::InvalidParameter(format!(
            "x' has {} coordinates, n = {} needs {}",
            xprime.len(),
            stage.n,
            stage.n - 1
        )));
    }
    Ok(())
}

fn lattice_phase_magnitude(stage: &Stage, t: f64, x: f64) -> f64 {
    let dl = stage.d * stage.lattice_hi as f64;
    dl * x.abs() + t.abs() * dl * dl
}

/// One axis of the lattice reduction:
/// `Σ_l e^{iDlx} e^{itD²l²} S_tψ(x + 2tDl)`.
fn g_axis_sum(
    stage: &Stage,
    bump: &FrequencyBump,
    t: f64,
    x: f64,
    spec: &QuadratureSpec,
) -> Result<(Complex64, f64)> {
    let m = lattice_phase_magnitude(stage, t, x);
    if !(m <= PHASE_CEILING) {
        return Err(LabError::PrecisionLoss {
            operation: "propagate_G_v".into(),
            magnitude: m,
            ceiling: PHASE_CEILING,
        });
    }
    let dy = 2.0 * t * stage.d;
    let y0 = x + dy * stage.lattice_lo as f64;
    let psi = psi_sweep(bump, t, y0, dy, stage.lattice_count(), spec)?;
    let mut sum = Complex64::new(0.0, 0.0);
    let mut err = 0.0;
    for (l, p) in stage.lattice().zip(&psi) {
        let dl = DoubleDouble::product(stage.d, l as f64);
        let mut acc = PhaseAccumulator::new();
        acc.add_dd(dl.mul_f64(x));
        acc.add_dd(dl.square().mul_f64(t));
        let (h, lo) = acc.reduced();
        sum += cis(h + lo) * p.value;
        err += p.est_error;
    }
    Ok((sum, err))
}

fn combine_axes(amplitude: f64, axes: &[(Complex64, f64)], mode: EvalMode) -> EvalResult {
    let mut value = Complex64::new(amplitude, 0.0);
    for (a, _) in axes {
        value *= a;
    }
    let mut err = 0.0;
    for j in 0..axes.len() {
        let mut term = axes[j].1;
        for (i, (a, e)) in axes.iter().enumerate() {
            if i != j {
                term *= a.norm() + e;
            }
        }
        err += term;
    }
    EvalResult {
        value,
        est_error: err * amplitude,
        mode,
    }
}

/// Semi-analytic `S_t G_v(x') = R^{-(n-1)/4} Π_j Σ_l e^{iDlx_j} e^{itD²l²} S_tψ(x_j + 2tDl)`.
pub fn propagate_g_v(
    stage: &Stage,
    t: f64,
    xprime: &[f64],
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    check_xprime(stage, xprime)?;
    let bump = FrequencyBump::standard(stage.n)?;
    let axes = xprime
        .iter()
        .map(|&x| g_axis_sum(stage, &bump, t, x, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_axes(
        stage.amplitude(),
        &axes,
        EvalMode::SemiAnalytic,
    ))
}

/// Band quadrature of `∫ e^{iξx + itξ²} Σ_l ψ̂(ξ - Dl) dξ` per axis.
pub fn propagate_g_v_direct(
    stage: &Stage,
    t: f64,
    xprime: &[f64],
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    check_xprime(stage, xprime)?;
    let bump = FrequencyBump::standard(stage.n)?;
    let r = bump.radius;
    let d = stage.d;
    let lo = d * stage.lattice_lo as f64 - r;
    let hi = d * stage.lattice_hi as f64 + r;
    let mut bps = Vec::new();
    for l in stage.lattice() {
        let c = d * l as f64;
        bps.extend_from_slice(&[c - r, c - 0.5 * r, c + 0.5 * r, c + r]);
    }
    let fhat = |xi: f64| -> Complex64 {
        let l = (xi / d)
            .round()
            .clamp(stage.lattice_lo as f64, stage.lattice_hi as f64);
        Complex64::new(bump.eval_hat(xi - d * l), 0.0)
    };
    let axes = xprime
        .iter()
        .map(|&x| {
            schrodinger_mean_fhat(fhat, (lo, hi), &bps, r / 4.0, t, x, spec)
                .map(|e| (e.value, e.est_error))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(combine_axes(
        stage.amplitude(),
        &axes,
        EvalMode::DirectOracle,
    ))
}

/// Kernel route for `S_t G_v`: per axis `Σ_l ∫ K_t(x - y) ψ(y) e^{iDly} dy`
/// over `|y| <= Y`, with the truncated mass certified by the tail of `g`.
pub fn propagate_g_v_kernel(
    stage: &Stage,
    t: f64,
    xprime: &[f64],
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    if t == 0.0 {
        return Err(LabError::DomainError);
    }
    check_xprime(stage, xprime)?;
    let bump = FrequencyBump::standard(stage.n)?;
    let table = FourierTable::standard();
    let ymax = table.xi_max() / bump.radius;
    let kmod = (PI / t.abs()).sqrt();
    let tail = kmod * bump.psi_tail_l1(ymax, table);
    let amp = |y: f64| Complex64::new(bump.psi_fast(y, table), 0.0);
    let mut axes = Vec::with_capacity(xprime.len());
    for &x in xprime {
        let mut sum = Complex64::new(0.0, 0.0);
        let mut err = 0.0;
        for l in stage.lattice() {
            let f = CompactFunction {
                amp: &amp,
                support: (-ymax, ymax),
                breakpoints: vec![],
                carrier: stage.d * l as f64,
                max_width: 4.0 / bump.radius,
            };
            let e = propagate_by_kernel(&f, t, x, spec)?;
            sum += e.value;
            err += e.est_error + tail;
        }
        axes.push((sum, err));
    }
    Ok(combine_axes(
        stage.amplitude(),
        &axes,
        EvalMode::KernelConvolution,
    ))
}

/// `t`-independent bound `R^{-(n-1)/4} (count · ‖ψ̂‖₁)^{n-1}` on `|S_t G_v|`.
pub fn g_v_majorant(stage: &Stage) -> Result<EvalResult> {
    let bump = FrequencyBump::standard(stage.n)?;
    let per_axis = stage.lattice_count() as f64 * bump.hat_lp_power(1);
    Ok(EvalResult {
        value: Complex64::new(stage.amplitude() * per_axis.powi(stage.n as i32 - 1), 0.0),
        est_error: 0.0,
        mode: EvalMode::Majorant,
    })
}

/// Semi-analytic when the lattice phases stay below the ceiling, the
/// majorant otherwise.
pub fn propagate_g_v_auto(
    stage: &Stage,
    t: f64,
    xprime: &[f64],
    spec: &QuadratureSpec,
) -> Result<EvalResult> {
    match propagate_g_v(stage, t, xprime, spec) {
        Err(LabError::PrecisionLoss { .. }) => g_v_majorant(stage),
        other => other,
    }
}

// ---------------------------------------------------------------------------
// h

/// Contribution of one stage to `S_t h(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StageTerm {
    pub k: usize,
    pub f: EvalResult,
    pub g: EvalResult,
    pub term: EvalResult,
}

/// `S_t h(x)` with the per-stage breakdown.
#[derive(Clone, Debug, PartialEq)]
pub struct HEvaluation {
    /// Sum of the exact terms; majorant terms are folded into `est_error`.
    pub total: EvalResult,
    pub terms: Vec<StageTerm>,
}

impl HEvaluation {
    /// `Σ_{i≠k} |S_t h_{v_i}(x)|` (upper estimate).
    pub fn cross_sum(&self, k: usize) -> f64 {
        self.terms
            .iter()
            .filter(|s| s.k != k)
            .map(|s| s.term.abs_upper())
            .sum()
    }

    pub fn term(&self, k: usize) -> Option<&StageTerm> {
        self.terms.iter().find(|s| s.k == k)
    }
}

/// One stage term with automatic route selection.
pub fn propagate_h_v(
    stage: &Stage,
    t: f64,
    point: &Point,
    spec: &QuadratureSpec,
) -> Result<StageTerm> {
    let f = propagate_f_v_auto(stage, t, point.x1, spec)?;
    let g = propagate_g_v_auto(stage, t, &point.xprime, spec)?;
    Ok(StageTerm {
        k: stage.k,
        f,
        g,
        term: f.times(&g),
    })
}

/// `Σ_k S_t f_{v_k}(x_1) S_t G_{v_k}(x')` over the schedule's stages.
pub fn propagate_h(
    schedule: &Schedule,
    t: f64,
    point: &Point,
    spec: &QuadratureSpec,
) -> Result<HEvaluation> {
    let stages = schedule
        .stages_used()
        .map(|k| crate::construction::make_stage(schedule, k))
        .collect::<Result<Vec<_>>>()?;
    propagate_h_stages(&stages, t, point, spec)
}

/// As [`propagate_h`] over prebuilt stages.
pub fn propagate_h_stages(
    stages: &[Stage],
    t: f64,
    point: &Point,
    spec: &QuadratureSpec,
) -> Result<HEvaluation> {
    let mut terms = Vec::with_capacity(stages.len());
    let mut value = Complex64::new(0.0, 0.0);
    let mut err = 0.0;
    let mut all_exact = true;
    for s in stages {
        let term = propagate_h_v(s, t, point, spec)?;
        if term.term.is_exact() {
            value += term.term.value;
            err += term.term.est_error;
        } else {
            all_exact = false;
            err += term.term.abs_upper();
        }
        terms.push(term);
    }
    let mode = if all_exact {
        EvalMode::SemiAnalytic
    } else {
        EvalMode::Majorant
    };
    Ok(HEvaluation {
        total: EvalResult {
            value,
            est_error: err,
            mode,
        },
        terms,
    })
}

/// One row of a batch evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchRow {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub result: EvalResult,
}

/// Writes `k, t, x1..xn, re, im, abs, est_err, mode`.
pub fn write_batch_csv<W: Write>(mut w: W, rows: &[BatchRow]) -> Result<()> {
    let dim = rows.first().map(|r| r.x.len()).unwrap_or(1);
    let xs: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    writeln!(w, "k,t,{},re,im,abs,est_err,mode", xs.join(","))?;
    for r in rows {
        let xs: Vec<String> = r.x.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(
            w,
            "{},{:.16e},{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.k,
            r.t,
            xs.join(","),
            r.result.value.re,
            r.result.value.im,
            r.result.abs(),
            r.result.est_error,
            r.result.mode.as_str()
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::{f_v_eval, g_v_eval};

    fn spec() -> QuadratureSpec {
        QuadratureSpec::new(1e-10, 1e-13)
    }

    fn rel(a: Complex64, b: Complex64) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn kernel_modulus_phase_and_scaling() {
        let k = kernel_k_t(0.3, &[0.7]).unwrap();
        assert!((k.norm() - (PI / 0.3).sqrt()).abs() < 1e-14);
        let k0 = kernel_k_t(0.3, &[0.0, 0.0]).unwrap();
        assert!((k0 / k0.norm() - cis(PI / 2.0)).norm() < 1e-15);
        let a = kernel_k_t(4.0 * 0.05, &[2.0 * 0.3, 2.0 * -0.2]).unwrap();
        let b = kernel_k_t(0.05, &[0.3, -0.2]).unwrap();
        assert!((a - b / 4.0).norm() < 1e-13);
        assert_eq!(kernel_k_t(0.0, &[1.0]), Err(LabError::DomainError));
        // t < 0 conjugates
        let c = kernel_k_t(-0.3, &[0.7]).unwrap();
        assert!((c - k.conj()).norm() < 1e-14);
    }

    #[test]
    fn kernel_matches_truncated_fresnel() {
        // ∫ e^{iξy + itξ²} e^{-ξ²/L²} dξ → K_t(y) as L grows; Gaussian cut-off
        // with closed form √(π/(1/L² - it)) e^{-y²/(4(1/L² - it))}
        let (t, y) = (0.2, 0.9);
        let a = Complex64::new(1e-6, -t);
        let closed = (Complex64::new(PI, 0.0) / a).sqrt() * (-(y * y) / (4.0 * a)).exp();
        let k = kernel_k_t(t, &[y]).unwrap();
        assert!((closed - k).norm() < 1e-4 * k.norm());
    }

    #[test]
    fn inversion_at_time_zero() {
        let s = Stage::from_v(2, 0.125).unwrap();
        for &x in &[0.0, 0.03, 0.07, -0.1, 0.2] {
            let got = propagate_f_v(&s, 0.0, x, &spec()).unwrap();
            let want = f_v_eval(&s, x) * (2.0 * PI);
            assert!(
                (got.value - want).norm() < 1e-9,
                "{x}: {:?} vs {want}",
                got.value
            );
        }
        let s = Stage::from_log2_r(2, 0, 8.0).unwrap();
        for &x in &[0.0, 0.3, 1.7] {
            let got = propagate_g_v(&s, 0.0, &[x], &spec()).unwrap();
            let want = g_v_eval(&s, &[x]).unwrap() * (2.0 * PI);
            assert!((got.value - want).norm() < 1e-9, "{x}");
        }
    }

    #[test]
    fn semi_analytic_matches_direct_and_kernel() {
        let s = Stage::from_v(2, 0.125).unwrap();
        for &(t, x) in &[(1e-3, 0.7), (0.05, 0.7), (-0.02, 0.3), (3e-4, -0.55)] {
            let a = propagate_f_v(&s, t, x, &spec()).unwrap();
            let b = propagate_f_v_direct(&s, t, x, &spec()).unwrap();
            let c = propagate_f_v_kernel(&s, t, x, &spec()).unwrap();
            assert!(rel(a.value, b.value) < 1e-8, "{t},{x}: {a:?} {b:?}");
            assert!(rel(c.value, b.value) < 1e-8, "{t},{x}: {c:?} {b:?}");
        }
    }

    #[test]
    fn g_v_routes_agree() {
        let s = Stage::from_log2_r(2, 0, 8.0).unwrap();
        for &(t, x) in &[(1e-3, 0.7), (0.01, -2.0), (-3e-4, 0.1)] {
            let a = propagate_g_v(&s, t, &[x], &spec()).unwrap();
            let b = propagate_g_v_direct(&s, t, &[x], &spec()).unwrap();
            assert!(rel(a.value, b.value) < 1e-8, "{t},{x}: {a:?} {b:?}");
        }
        let a = propagate_g_v(&s, 2e-3, &[0.4], &spec()).unwrap();
        let c = propagate_g_v_kernel(&s, 2e-3, &[0.4], &spec()).unwrap();
        assert!(rel(c.value, a.value) < 1e-6, "{a:?} {c:?}");
    }

    #[test]
    fn phi_is_a_product_and_bounded() {
        let p = propagate_phi(3, 0.1, &[0.3, -1.2], &spec()).unwrap();
        let b = FrequencyBump::standard(3).unwrap();
        let a1 = propagate_psi(&b, 0.1, 0.3, &spec()).unwrap().value;
        let a2 = propagate_psi(&b, 0.1, -1.2, &spec()).unwrap().value;
        assert!((p.value - a1 * a2).norm() < 1e-14);
        let l1 = b.hat_lp_power(1);
        assert!(p.abs() <= l1 * l1);
        let p0 = propagate_phi(2, 0.0, &[0.0], &spec()).unwrap();
        assert!((p0.value - 2.0 * PI).norm() < 1e-10);
    }

    #[test]
    fn sweep_matches_pointwise() {
        let b = FrequencyBump::standard(2).unwrap();
        let sw = psi_sweep(&b, 0.01, -0.3, 0.05, 40, &spec()).unwrap();
        for (j, e) in sw.iter().enumerate() {
            let y = -0.3 + 0.05 * j as f64;
            let p = propagate_psi(&b, 0.01, y, &spec()).unwrap();
            assert!((e.value - p.value).norm() < 1e-10, "{j}");
        }
    }

    #[test]
    fn majorant_bounds_semi_analytic() {
        let s = Stage::from_log2_r(2, 0, 10.0).unwrap();
        let m = g_v_majorant(&s).unwrap().abs();
        for &t in &[1e-4, 1e-3, 1e-2] {
            let g = propagate_g_v(&s, t, &[0.37], &spec()).unwrap();
            assert!(g.abs() <= m);
        }
    }

    #[test]
    fn batch_csv_header() {
        let mut buf = Vec::new();
        let row = BatchRow {
            k: 1,
            t: 0.5,
            x: vec![0.1, 0.2],
            result: EvalResult {
                value: Complex64::new(1.0, -1.0),
                est_error: 0.0,
                mode: EvalMode::KernelConvolution,
            },
        };
        write_batch_csv(&mut buf, &[row]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("k,t,x1,x2,re,im,abs,est_err,mode\n"));
        assert!(s.trim_end().ends_with("kernel_convolution"));
    }
}
