//! L¹, L² and H_s norms of the construction and their scaling laws.
//!
//! `‖f‖_{H_s}² = ∫ (1+|ξ|²)^s |f̂(ξ)|² dξ` with the unnormalised transform, so
//! Plancherel reads `‖f̂‖₂² = (2π)^n ‖f‖₂²`.

use crate::construction::{Schedule, Stage};
use crate::error::{LabError, Result};
use crate::fit::ScalingFit;
use crate::profiles::{BumpProfile, FourierTable, FrequencyBump};
use crate::quad::{integrate_real, GaussLegendre, QuadratureSpec};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::sync::OnceLock;

/// One measured norm with its closed form or bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub quantity: String,
    pub k: usize,
    pub v: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub measured: f64,
    pub est_error: f64,
    pub bound: Option<f64>,
    /// `measured / bound` for envelope entries.
    pub constant: Option<f64>,
    pub s: Option<f64>,
}

impl NormReport {
    fn new(quantity: &str, stage: &Stage, measured: f64, est_error: f64) -> Self {
        Self {
            quantity: quantity.to_string(),
            k: stage.k,
            v: stage.v,
            r: stage.r,
            measured,
            est_error,
            bound: None,
            constant: None,
            s: None,
        }
    }

    fn with_bound(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self
    }

    fn with_envelope(mut self, bound: f64) -> Self {
        self.bound = Some(bound);
        self.constant = Some(self.measured / bound);
        self
    }
}

/// `(‖ǧ‖₁, ‖ǧ‖₂²)`.
pub fn bump_norms() -> (f64, f64) {
    static N: OnceLock<(f64, f64)> = OnceLock::new();
    *N.get_or_init(|| {
        let p = BumpProfile::default();
        (p.lp_power(1), p.lp_power(2))
    })
}

fn hat_l2_sq(n: usize) -> Result<f64> {
    Ok(FrequencyBump::standard(n)?.hat_lp_power(2))
}

/// `‖f_v‖₂` by quadrature on `(-v, v)` against `v^{1/2} ‖ǧ‖₂`.
pub fn l2_f_v(stage: &Stage, spec: &QuadratureSpec) -> Result<NormReport> {
    let p = BumpProfile::default();
    let v = stage.v;
    let s = p.support_half_width * v;
    let q = p.plateau_half_width * v;
    let (sq, err) = integrate_real(
        |x| p.eval(x / v).powi(2),
        -s,
        s,
        &[-q, q],
        s / 8.0,
        spec,
        "l2_f_v",
    )?;
    let measured = sq.sqrt();
    let closed = (v * bump_norms().1).sqrt();
    Ok(NormReport::new(
        "L2_fv",
        stage,
        measured,
        0.5 * err / measured.max(f64::MIN_POSITIVE),
    )
    .with_bound(closed))
}

/// `‖G_v‖₂` from `‖Ĝ_v‖₂² = R^{-(n-1)/2} Σ_l ‖Φ̂‖₂²` when the translates of
/// `ψ̂` are disjoint (`D > 2r`), otherwise by frequency quadrature of the
/// overlapping sum.
pub fn l2_g_v(stage: &Stage, spec: &QuadratureSpec) -> Result<NormReport> {
    let n = stage.n;
    let m = (n - 1) as f64;
    let bump = FrequencyBump::standard(n)?;
    let r = bump.radius;
    let pref = (2.0 * PI).powf(-m) * (-m / 2.0 * stage.log2_r).exp2();
    let count = stage.lattice_count() as f64;
    let closed = (pref * (count * hat_l2_sq(n)?).powf(m)).sqrt();
    if stage.d > 2.0 * r {
        return Ok(NormReport::new("L2_Gv", stage, closed, 0.0).with_bound(closed));
    }
    // overlapping translates: integrate |Σ_l ψ̂(ξ - D l)|² on one axis
    let lo = stage.lattice_lo as f64 * stage.d - r;
    let hi = stage.lattice_hi as f64 * stage.d + r;
    let axis = |xi: f64| {
        let s: f64 = stage
            .lattice()
            .map(|l| bump.eval_hat(xi - stage.d * l as f64))
            .sum();
        s * s
    };
    let (a, err) = integrate_real(axis, lo, hi, &[], r / 4.0, spec, "l2_g_v")?;
    let measured = (pref * a.powf(m)).sqrt();
    Ok(NormReport::new("L2_Gv", stage, measured, 0.5 * m * err / a).with_bound(closed))
}

/// Reference implementation of the one-axis integrals `∫ w(y) |S(y)|^p dy`
/// with `S(y) = Σ_{l∈L} e^{iDly}`, cut at the zeros of `S`.
struct LatticeAxis {
    d: f64,
    count: usize,
    /// `|S|^p` at the nodes of each residue cell, fine and coarse rule.
    fine: Vec<f64>,
    coarse: Vec<f64>,
    fine_rule: GaussLegendre,
    coarse_rule: GaussLegendre,
}

impl LatticeAxis {
    fn new(stage: &Stage, power: i32) -> Self {
        let count = stage.lattice_count();
        let fine_rule = GaussLegendre::new(12);
        let coarse_rule = GaussLegendre::new(6);
        let cell = 2.0 * PI / count as f64;
        let tab = |rule: &GaussLegendre| {
            let mut out = Vec::with_capacity(count * rule.nodes.len());
            for c in 0..count {
                for &u in &rule.nodes {
                    let th = (c as f64 + 0.5 * (u + 1.0)) * cell;
                    out.push(dirichlet_modulus(count, th).powi(power));
                }
            }
            out
        };
        Self {
            d: stage.d,
            count,
            fine: tab(&fine_rule),
            coarse: tab(&coarse_rule),
            fine_rule,
            coarse_rule,
        }
    }

    /// `(∫_{-Y}^{Y} w |S|^p, |fine - coarse|)`; `Y` is rounded up to whole periods.
    fn integrate<W: Fn(f64) -> f64>(&self, w: W, y_max: f64) -> (f64, f64) {
        let period = 2.0 * PI / self.d;
        let h = period / self.count as f64;
        let periods = (y_max / period).ceil() as i64;
        let (mut fine, mut coarse) = (0.0, 0.0);
        for m in -periods..periods {
            let base = m as f64 * period;
            for c in 0..self.count {
                let a = base + c as f64 * h;
                let mut sf = 0.0;
                let off = c * self.fine_rule.nodes.len();
                for (i, (&u, &wt)) in self
                    .fine_rule
                    .nodes
                    .iter()
                    .zip(&self.fine_rule.weights)
                    .enumerate()
                {
                    sf += wt * w(a + 0.5 * h * (u + 1.0)) * self.fine[off + i];
                }
                let mut sc = 0.0;
                let off = c * self.coarse_rule.nodes.len();
                for (i, (&u, &wt)) in self
                    .coarse_rule
                    .nodes
                    .iter()
                    .zip(&self.coarse_rule.weights)
                    .enumerate()
                {
                    sc += wt * w(a + 0.5 * h * (u + 1.0)) * self.coarse[off + i];
                }
                fine += 0.5 * h * sf;
                coarse += 0.5 * h * sc;
            }
        }
        (fine, (fine - coarse).abs())
    }
}

/// `|Σ_{l=0}^{N-1} e^{ilθ}| = |sin(Nθ/2) / sin(θ/2)|`.
pub fn dirichlet_modulus(count: usize, theta: f64) -> f64 {
    let th = theta.rem_euclid(2.0 * PI);
    let den = (0.5 * th).sin();
    if den.abs() < 1e-9 || (2.0 * PI - th) < 2e-9 {
        return count as f64;
    }
    ((0.5 * count as f64 * th).sin() / den).abs()
}

/// Dirichlet kernel `D_p(θ) = sin((2p+1)θ/2) / sin(θ/2)`.
pub fn dirichlet_kernel(p: i64, theta: f64) -> f64 {
    let th = theta.rem_euclid(2.0 * PI);
    let den = (0.5 * th).sin();
    let m = (2 * p + 1) as f64;
    if den.abs() < 1e-9 || (2.0 * PI - th) < 2e-9 {
        return m;
    }
    (0.5 * m * th).sin() / den
}

/// Physical-space `‖G_v‖₂` from `∫ ψ² |S|²` per axis; meant for small `R`.
pub fn l2_g_v_physical(stage: &Stage, rel_tol: f64) -> Result<NormReport> {
    let n = stage.n;
    let m = (n - 1) as f64;
    let bump = FrequencyBump::standard(n)?;
    let table = FourierTable::standard();
    let count = stage.lattice_count() as f64;
    // |ψ|² tail below count² sup|ψ| ∫|ψ|
    let mut y = 16.0;
    let tail = |y: f64| count * count * bump.psi_decay_bound(y, table) * bump.psi_tail_l1(y, table);
    while tail(y) > 0.1 * rel_tol * count && y * bump.radius < table.xi_max() {
        y *= 1.25;
    }
    if tail(y) > 0.1 * rel_tol * count {
        return Err(LabError::TailCertification(format!(
            "psi^2 tail {:.3e} at Y = {y:.1} exceeds budget",
            tail(y)
        )));
    }
    let axis = LatticeAxis::new(stage, 2);
    let (a, err) = axis.integrate(|y| bump.psi_fast(y, table).powi(2), y);
    let measured = ((-m / 2.0 * stage.log2_r).exp2() * a.powf(m)).sqrt();
    let closed = l2_g_v(stage, &QuadratureSpec::default())?.measured;
    Ok(NormReport::new(
        "L2_Gv_physical",
        stage,
        measured,
        0.5 * m * (err + tail(y)) / a,
    )
    .with_bound(closed))
}

/// `‖f_v‖₁ = v ‖ǧ‖₁`, `‖G_v‖₁` by cell quadrature, `‖h_v‖₁` their product.
///
/// Bounds attached: `v`, `R^{-(n-1)/4} (ln R)^{n-1}`, `v^{5/4}` (the last for
/// `n = 2`; in general `v R^{-(n-1)/4} (ln R)^{n-1}`).
pub fn l1_norms(stage: &Stage, rel_tol: f64) -> Result<[NormReport; 3]> {
    let n = stage.n;
    let m = (n - 1) as f64;
    let bump = FrequencyBump::standard(n)?;
    let table = FourierTable::standard();
    let count = stage.lattice_count() as f64;

    let f1 = stage.v * bump_norms().0;
    let f = NormReport::new("L1_fv", stage, f1, 0.0).with_envelope(stage.v);

    // ∫|ψ||S| >= ∫_{|y|<1}|ψ| ~ 1, so an absolute budget is also relative
    let budget = 0.1 * rel_tol;
    let mut y = 16.0;
    while count * bump.psi_tail_l1(y, table) > budget && y * bump.radius < table.xi_max() {
        y *= 1.25;
    }
    let tail = count * bump.psi_tail_l1(y, table);
    if tail > budget {
        return Err(LabError::TailCertification(format!(
            "|psi| tail {tail:.3e} at Y = {y:.1} exceeds {budget:.3e}"
        )));
    }
    let axis = LatticeAxis::new(stage, 1);
    let (a, err) = axis.integrate(|y| bump.psi_fast(y, table).abs(), y);
    let a_hi = a + err + tail;
    let g1 = stage.amplitude() * a.powf(m);
    let ln_r = stage.log2_r * std::f64::consts::LN_2;
    let g = NormReport::new("L1_Gv", stage, g1, m * (a_hi / a - 1.0))
        .with_envelope(stage.amplitude() * ln_r.powf(m));

    let h_bound = stage.v * stage.amplitude() * ln_r.powf(m);
    let h_bound = if n == 2 { stage.v.powf(1.25) } else { h_bound };
    let h = NormReport::new("L1_hv", stage, f1 * g1, g.est_error).with_envelope(h_bound);
    Ok([f, g, h])
}

/// Dirichlet `L¹` masses of one stage.
#[derive(Clone, Debug, Serialize)]
pub struct DirichletReport {
    pub report: NormReport,
    pub p: i64,
    pub offsets: Vec<f64>,
    pub masses: Vec<f64>,
    /// `∫` over one full period of `|D_p|` in `θ`.
    pub period_mass: f64,
}

struct DirichletCells {
    p: i64,
    rule: &'static GaussLegendre,
    cell_mass: Vec<f64>,
    period_mass: f64,
}

impl DirichletCells {
    fn new(p: i64) -> Self {
        let m = (2 * p + 1) as usize;
        let h = 2.0 * PI / m as f64;
        let rule = GaussLegendre::order16();
        let cell_mass: Vec<f64> = (0..m)
            .map(|c| {
                let a = c as f64 * h;
                rule.integrate(|th| dirichlet_kernel(p, th).abs(), a, a + h)
            })
            .collect();
        let period_mass = cell_mass.iter().sum();
        Self {
            p,
            rule,
            cell_mass,
            period_mass,
        }
    }

    /// `∫_0^θ |D_p|` for `θ >= 0`.
    fn cumulative(&self, theta: f64) -> f64 {
        let m = self.cell_mass.len();
        let h = 2.0 * PI / m as f64;
        let periods = (theta / (2.0 * PI)).floor();
        let rest = theta - periods * 2.0 * PI;
        let full = ((rest / h).floor() as usize).min(m - 1);
        let mut acc = periods * self.period_mass + self.cell_mass[..full].iter().sum::<f64>();
        let a = full as f64 * h;
        if rest > a {
            acc += self
                .rule
                .integrate(|th| dirichlet_kernel(self.p, th).abs(), a, rest);
        }
        acc
    }
}

/// `sup_a ∫_a^{a+1} |D_p(D x)| dx` over `offsets` evenly spread on one period
/// `[0, 2π/D)`, against `ln R`.
pub fn dirichlet_l1(stage: &Stage, offsets: usize) -> DirichletReport {
    let cells = DirichletCells::new(stage.p);
    let d = stage.d;
    let period = 2.0 * PI / d;
    let offs: Vec<f64> = (0..offsets.max(1))
        .map(|j| j as f64 * period / offsets.max(1) as f64)
        .collect();
    let masses: Vec<f64> = offs
        .iter()
        .map(|&a| (cells.cumulative(d * (a + 1.0)) - cells.cumulative(d * a)) / d)
        .collect();
    let sup = masses.iter().cloned().fold(0.0, f64::max);
    let ln_r = stage.log2_r * std::f64::consts::LN_2;
    DirichletReport {
        report: NormReport::new("L1_Dirichlet", stage, sup, 0.0).with_envelope(ln_r),
        p: stage.p,
        offsets: offs,
        masses,
        period_mass: cells.period_mass,
    }
}

/// Tunables of the `H_s` computation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsConfig {
    /// Split point `|ξ₁| = A R`.
    pub split_a: f64,
    /// Decay order `N` of the `I₂` envelope.
    pub decay_order: f64,
    /// GL panels per smooth piece of `ψ̂²`.
    pub panels: usize,
}

impl Default for HsConfig {
    fn default() -> Self {
        Self {
            split_a: 4.0,
            decay_order: 8.0,
            panels: 6,
        }
    }
}

/// `H_s` norm of `h_v` with the `I₁/I₂` breakdown.
#[derive(Clone, Debug, Serialize)]
pub struct HsReport {
    /// Norm (square root of the total) against `R^{s - n/(2(n+1))}`.
    pub report: NormReport,
    pub i1: f64,
    pub i2: f64,
    /// Envelope bound on the part of `I₂` beyond the quadrature range.
    pub i2_tail: f64,
    pub total: f64,
    /// `C R^{-N}` with `C` certified over all `R`.
    pub i2_envelope: f64,
    pub i2_constant: f64,
    /// `sup (1+|ξ|²)^s / |ξ|^{2s}` over the support of `ĥ_v`.
    pub weight_ratio: f64,
    /// Relative error of the `ξ'` rule on the exact `s = 0` mass.
    pub transverse_error: f64,
}

/// Atoms `(q, ω)` with `Σ ω F(q) ≈ R^{-(n-1)/2} Σ_l ∫ |Φ̂(u)|² F(|Dl + u|²) du`.
fn transverse_atoms(stage: &Stage, panels: usize) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let n = stage.n;
    let bump = FrequencyBump::standard(n)?;
    let r = bump.radius;
    let [b0, b1] = bump.breakpoints();
    let gl = GaussLegendre::order16();
    let mut us = Vec::new();
    let mut ws = Vec::new();
    for (a, b) in [(-r, b0), (b0, b1), (b1, r)] {
        let h = (b - a) / panels as f64;
        for j in 0..panels {
            let c = a + (j as f64 + 0.5) * h;
            for (&x, &w) in gl.nodes.iter().zip(&gl.weights) {
                let u = c + 0.5 * h * x;
                us.push(u);
                ws.push(0.5 * h * w * bump.eval_hat(u).powi(2));
            }
        }
    }
    let mass: f64 = ws.iter().sum();
    let exact = bump.hat_lp_power(2);
    let rel_err = (mass / exact - 1.0).abs();

    let axis: Vec<(f64, f64)> = stage
        .lattice()
        .flat_map(|l| {
            us.iter()
                .zip(&ws)
                .map(move |(&u, &w)| ((stage.d * l as f64 + u).powi(2), w))
        })
        .collect();
    let dims = n - 1;
    let atoms = (axis.len() as f64).powi(dims as i32);
    if atoms > 2e7 {
        return Err(LabError::InvalidParameter(format!(
            "H_s transverse rule needs {atoms:.2e} atoms at n = {n}, R = 2^{:.2}",
            stage.log2_r
        )));
    }
    let mut q = vec![0.0];
    let mut w = vec![1.0];
    for _ in 0..dims {
        let mut q2 = Vec::with_capacity(q.len() * axis.len());
        let mut w2 = Vec::with_capacity(q.len() * axis.len());
        for (&qa, &wa) in q.iter().zip(&w) {
            for &(qb, wb) in &axis {
                q2.push(qa + qb);
                w2.push(wa * wb);
            }
        }
        q = q2;
        w = w2;
    }
    let amp = (-(dims as f64) / 2.0 * stage.log2_r).exp2();
    for x in w.iter_mut() {
        *x *= amp;
    }
    Ok((q, w, rel_err))
}

/// Cubic Hermite interpolant of `ln W` in `ln c`, where
/// `W(c) = Σ ω (c + q)^s`.
struct WeightTable {
    step: f64,
    f: Vec<f64>,
    df: Vec<f64>,
    s: f64,
    mass: f64,
}

impl WeightTable {
    fn build(q: &[f64], w: &[f64], s: f64, c_max: f64) -> Self {
        let mass: f64 = w.iter().sum();
        let step = 0.02;
        let top = c_max.max(2.0).ln();
        let nodes = (top / step).ceil() as usize + 2;
        let mut f = Vec::with_capacity(nodes);
        let mut df = Vec::with_capacity(nodes);
        if s == 0.0 {
            return Self {
                step,
                f,
                df,
                s,
                mass,
            };
        }
        for j in 0..nodes {
            let c = (j as f64 * step).exp();
            let (mut a, mut b) = (0.0, 0.0);
            for (&qi, &wi) in q.iter().zip(w) {
                let base = c + qi;
                let p = base.powf(s);
                a += wi * p;
                b += wi * p / base;
            }
            f.push(a.ln());
            df.push(c * s * b / a);
        }
        Self {
            step,
            f,
            df,
            s,
            mass,
        }
    }

    fn eval(&self, c: f64) -> f64 {
        if self.s == 0.0 {
            return self.mass;
        }
        let x = c.max(1.0).ln() / self.step;
        let j = (x as usize).min(self.f.len() - 2);
        let t = x - j as f64;
        let h = self.step;
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * self.f[j]
            + (t3 - 2.0 * t2 + t) * h * self.df[j]
            + (-2.0 * t3 + 3.0 * t2) * self.f[j + 1]
            + (t3 - t2) * h * self.df[j + 1];
        v.exp()
    }
}

/// Upper Riemann sum of `∫_{lo}^{∞} E(η)² P(η) dη` with `E` the monotone
/// decay envelope of `g` and `P` non-decreasing.
fn envelope_moment<P: Fn(f64) -> f64>(table: &FourierTable, lo: f64, poly: P) -> f64 {
    let mut acc = 0.0;
    let mut x = lo.max(0.0);
    let mut h = 0.25;
    loop {
        let e = table.decay_bound(x);
        let piece = e * e * poly(x + h) * h;
        acc += piece;
        if x > table.xi_max() {
            if piece <= 1e-18 * acc || e == 0.0 || x > 1e9 {
                // remaining envelope mass: E decays like exp(-b√η), faster than
                // any polynomial, and `piece` already shrank by 1e18
                break;
            }
            h = (0.05 * x).max(0.25);
        }
        x += h;
    }
    acc
}

/// Envelope bound on `I₂` at `R`: the `ξ₁` integral outside `|ξ₁| < A R` with
/// `|g|` replaced by its decay envelope and the lattice count by `R/(2D) + 1`.
pub fn i2_envelope(n: usize, s: f64, cfg: &HsConfig, log2_r: f64) -> Result<f64> {
    let table = FourierTable::standard();
    let bump = FrequencyBump::standard(n)?;
    let nf = n as f64;
    let m = nf - 1.0;
    let r = log2_r.exp2();
    let sqrt_r = r.sqrt();
    let count = (log2_r * nf / (2.0 * (nf + 1.0))).exp2() / 2.0 + 1.0;
    let wmass = (-m / 2.0 * log2_r).exp2() * (count * bump.hat_lp_power(2)).powf(m);
    let trans = (r + m.sqrt() * bump.radius).powi(2);
    let poly = |eta: f64| (1.0 + (eta * sqrt_r + r).powi(2) + trans).powf(s);
    let lo = (cfg.split_a - 1.0) * sqrt_r;
    Ok(2.0 / sqrt_r * wmass * envelope_moment(table, lo, poly))
}

/// `sup_R R^N B(R)` for the envelope bound `B` of [`i2_envelope`], over a
/// dense grid `log2 R ∈ [1, 512]`.
pub fn i2_constant(n: usize, s: f64, cfg: &HsConfig) -> Result<f64> {
    let mut c = 0.0f64;
    let mut j = 8;
    while j <= 512 * 8 {
        let l = j as f64 / 8.0;
        let b = i2_envelope(n, s, cfg, l)?;
        if b == 0.0 && l > 64.0 {
            break;
        }
        c = c.max((cfg.decay_order * l + b.log2()).exp2());
        j += 1;
    }
    Ok(c)
}

/// `‖h_v‖_{H_s}` by the band integral `v ∫ g(η)² W(1 + (η/v - R)²) dη`,
/// where `W` carries the transverse lattice structure exactly.
pub fn hs_norm_h_v(
    stage: &Stage,
    s: f64,
    cfg: &HsConfig,
    spec: &QuadratureSpec,
) -> Result<HsReport> {
    if !(s >= 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "H_s needs s >= 0, got {s}"
        )));
    }
    let n = stage.n;
    let nf = n as f64;
    let table = FourierTable::standard();
    let (q, w, transverse_error) = transverse_atoms(stage, cfg.panels)?;
    let v = stage.v;
    let r = stage.r;
    let l = table.xi_max();
    let c_max = 1.0 + (l / v + r).powi(2);
    let wt = WeightTable::build(&q, &w, s, c_max);
    let integrand = |eta: f64| {
        let g = table.eval(eta);
        let xi1 = eta / v - r;
        g * g * wt.eval(1.0 + xi1 * xi1)
    };
    let lo1 = (1.0 - cfg.split_a) / v;
    let hi1 = (1.0 + cfg.split_a) / v;
    let clip = |x: f64| x.clamp(-l, l);
    let piece = |a: f64, b: f64| -> Result<(f64, f64)> {
        if b <= a {
            return Ok((0.0, 0.0));
        }
        let (val, err) = integrate_real(integrand, a, b, &[], 2.0, spec, "hs_norm_h_v")?;
        Ok((v * val, v * err))
    };
    let (i1, e1) = piece(clip(lo1), clip(hi1))?;
    let (i2a, e2a) = piece(-l, clip(lo1))?;
    let (i2b, e2b) = piece(clip(hi1), l)?;

    // beyond |η| = L: W(c) <= mass (c + max q)^s
    let q_max = q.iter().cloned().fold(0.0, f64::max);
    let poly = |eta: f64| (1.0 + (eta / v + r).powi(2) + q_max).powf(s);
    let i2_tail = 2.0 * v * wt.mass * envelope_moment(table, l, poly);

    let i2 = i2a + i2b;
    let total = i1 + i2;
    let err = e1 + e2a + e2b + i2_tail;
    if i2_tail > 0.1 * spec.target(total) {
        return Err(LabError::TailCertification(format!(
            "H_s tail {i2_tail:.3e} beyond |eta| = {l} exceeds 0.1 x tolerance"
        )));
    }

    let norm = total.sqrt();
    let bound = (stage.log2_r * (s - nf / (2.0 * (nf + 1.0)))).exp2();
    let i2_constant = i2_constant(n, s, cfg)?;
    let i2_envelope = (i2_constant.log2() - cfg.decay_order * stage.log2_r).exp2();
    // |ξ| >= |ξ'| >= R/(2D)·D - r on the support
    let xi_min = (stage.lattice_lo as f64 * stage.d - FrequencyBump::standard(n)?.radius).max(1.0);
    let weight_ratio = (1.0 + 1.0 / (xi_min * xi_min)).powf(s);
    let mut report = NormReport::new("Hs_hv", stage, norm, 0.5 * err / total).with_envelope(bound);
    report.s = Some(s);
    Ok(HsReport {
        report,
        i1,
        i2,
        i2_tail,
        total,
        i2_envelope,
        i2_constant,
        weight_ratio,
        transverse_error,
    })
}

/// Summability certificate for `Σ_k ‖h_{v_k}‖_{H_s}`.
#[derive(Clone, Debug, Serialize)]
pub struct MembershipReport {
    pub n: usize,
    pub s: f64,
    /// `2(n/(2(n+1)) - s)`.
    pub exponent: f64,
    pub stages: Vec<usize>,
    /// `log2` of the per-stage terms.
    pub log2_terms: Vec<f64>,
    /// Whether each term was measured or taken from the calibrated bound.
    pub measured: Vec<bool>,
    pub constant: f64,
    /// `log2` of the consecutive ratios.
    pub log2_ratios: Vec<f64>,
    pub log2_partial_sums: Vec<f64>,
    /// First stage from which every ratio is at most 1/2.
    pub dominated_from: Option<usize>,
    pub holds: bool,
}

/// Largest `log2 R` at which stages are measured rather than bounded.
pub const MEMBERSHIP_ORACLE_LOG2_R: f64 = 16.0;

/// Geometric-domination certificate over the stages `K..=k_max`.
///
/// Stages with `R <= 2^16` use measured norms; beyond that the term is
/// `C v_k^e`, `C` the largest measured `norm / v^e` times 1.05. The
/// certificate holds when `e > 0`, every ratio from some stage on is at most
/// 1/2, and the computed ratios are non-increasing there (so the bound
/// `ε_{k+1}^e` keeps shrinking past `k_max`).
pub fn hs_membership(
    schedule: &Schedule,
    s: f64,
    cfg: &HsConfig,
    spec: &QuadratureSpec,
) -> Result<MembershipReport> {
    let n = schedule.n;
    let nf = n as f64;
    let e = 2.0 * (nf / (2.0 * (nf + 1.0)) - s);
    let stages: Vec<usize> = schedule.stages_used().collect();
    let mut measured_log: Vec<Option<f64>> = Vec::with_capacity(stages.len());
    let mut c = 0.0f64;
    for &k in &stages {
        let l2v = schedule.log2_v(k);
        if -2.0 * l2v <= MEMBERSHIP_ORACLE_LOG2_R && n == 2 {
            let st = Stage::from_log2_v(n, k, l2v)?;
            let h = hs_norm_h_v(&st, s, cfg, spec)?;
            let lm = h.report.measured.log2();
            c = c.max(lm - e * l2v);
            measured_log.push(Some(lm));
        } else {
            measured_log.push(None);
        }
    }
    let log2_c = if c == 0.0 && measured_log.iter().all(|m| m.is_none()) {
        0.0
    } else {
        c + 1.05f64.log2()
    };
    let log2_terms: Vec<f64> = stages
        .iter()
        .zip(&measured_log)
        .map(|(&k, m)| m.unwrap_or(log2_c + e * schedule.log2_v(k)))
        .collect();
    let log2_ratios: Vec<f64> = log2_terms.windows(2).map(|p| p[1] - p[0]).collect();
    let mut log2_partial_sums = Vec::with_capacity(log2_terms.len());
    let mut acc = f64::NEG_INFINITY;
    for &t in &log2_terms {
        let m = acc.max(t);
        acc = m + ((acc - m).exp2() + (t - m).exp2()).log2();
        log2_partial_sums.push(acc);
    }
    let mut dominated_from = None;
    for i in (0..log2_ratios.len()).rev() {
        if log2_ratios[i] <= -1.0 {
            dominated_from = Some(stages[i]);
        } else {
            break;
        }
    }
    let monotone_tail = match dominated_from {
        Some(k0) => {
            let i0 = stages.iter().position(|&k| k == k0).unwrap_or(0);
            log2_ratios[i0..].windows(2).all(|p| p[1] <= p[0] + 1e-9)
        }
        None => false,
    };
    Ok(MembershipReport {
        n,
        s,
        exponent: e,
        stages,
        measured: measured_log.iter().map(|m| m.is_some()).collect(),
        log2_terms,
        constant: log2_c.exp2(),
        log2_ratios,
        log2_partial_sums,
        dominated_from,
        holds: e > 0.0 && dominated_from.is_some() && monotone_tail,
    })
}

/// Scaling tables and fits over a list of stages.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingSuite {
    pub rows: Vec<NormReport>,
    pub hs: Vec<HsReport>,
    pub dirichlet: Vec<DirichletReport>,
    pub fits: Vec<ScalingFit>,
    /// Envelope constants calibrated at the coarsest stage (×1.05).
    pub envelopes: Vec<EnvelopeCheck>,
}

/// One single-constant envelope claim across stages.
#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeCheck {
    pub quantity: String,
    pub calibrated: f64,
    pub worst: f64,
    pub holds: bool,
}

impl EnvelopeCheck {
    /// Constant from the first (coarsest) report, slack ×1.05, checked on the rest.
    pub fn from_reports<'a, I: IntoIterator<Item = &'a NormReport>>(
        quantity: &str,
        reports: I,
    ) -> Self {
        let cs: Vec<f64> = reports.into_iter().filter_map(|r| r.constant).collect();
        let calibrated = cs.first().copied().unwrap_or(f64::NAN) * 1.05;
        let worst = cs.iter().cloned().fold(0.0, f64::max);
        Self {
            quantity: quantity.to_string(),
            calibrated,
            worst,
            holds: worst <= calibrated,
        }
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(xs: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    xs.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, U, F: Fn(&T) -> U>(xs: &[T], f: F) -> Vec<U> {
    xs.iter().map(f).collect()
}

/// All norm suites on `stages` (coarsest first), `H_s` at exponent `s`.
pub fn scaling_suite(
    stages: &[Stage],
    s: f64,
    cfg: &HsConfig,
    spec: &QuadratureSpec,
) -> Result<ScalingSuite> {
    if stages.len() < 4 {
        return Err(LabError::InvalidParameter(format!(
            "scaling needs at least 4 stages, got {}",
            stages.len()
        )));
    }
    let n = stages[0].n;
    let nf = n as f64;
    let per: Vec<Result<(Vec<NormReport>, HsReport, DirichletReport)>> = par_map(stages, |st| {
        let mut rows = vec![l2_f_v(st, spec)?, l2_g_v(st, spec)?];
        rows.extend(l1_norms(st, 1e-6)?);
        let hs = hs_norm_h_v(st, s, cfg, spec)?;
        rows.push(hs.report.clone());
        Ok((rows, hs, dirichlet_l1(st, 64)))
    });
    let mut rows = Vec::new();
    let mut hs = Vec::new();
    let mut dirichlet = Vec::new();
    for p in per {
        let (r, h, d) = p?;
        rows.extend(r);
        hs.push(h);
        rows.push(d.report.clone());
        dirichlet.push(d);
    }
    let pick = |q: &str| -> Vec<&NormReport> { rows.iter().filter(|r| r.quantity == q).collect() };
    let ks: Vec<usize> = stages.iter().map(|s| s.k).collect();
    let vs: Vec<f64> = stages.iter().map(|s| s.v).collect();
    let rs: Vec<f64> = stages.iter().map(|s| s.r).collect();
    let vals = |q: &str| -> Vec<f64> { pick(q).iter().map(|r| r.measured).collect() };
    let fits = vec![
        ScalingFit::fit("L2_fv", "v", &vs, &vals("L2_fv"), 0.5, ks.clone())?,
        ScalingFit::fit(
            "L2_Gv",
            "R",
            &rs,
            &vals("L2_Gv"),
            -(nf - 1.0) / (4.0 * (nf + 1.0)),
            ks.clone(),
        )?,
        ScalingFit::fit(
            "Hs_hv",
            "v",
            &vs,
            &vals("Hs_hv"),
            2.0 * (nf / (2.0 * (nf + 1.0)) - s),
            ks.clone(),
        )?,
        ScalingFit::fit(
            "L1_hv",
            "v",
            &vs,
            &vals("L1_hv"),
            if n == 2 { 1.25 } else { 1.0 },
            ks,
        )?,
    ];
    let envelopes = ["L1_fv", "L1_Gv", "L1_hv", "L1_Dirichlet", "Hs_hv"]
        .iter()
        .map(|q| EnvelopeCheck::from_reports(q, pick(q)))
        .collect();
    Ok(ScalingSuite {
        rows,
        hs,
        dirichlet,
        fits,
        envelopes,
    })
}

/// `k,v,R,quantity,measured,bound,constant`.
pub fn write_scaling_csv<W: Write>(rows: &[NormReport], mut w: W) -> Result<()> {
    writeln!(w, "k,v,R,quantity,measured,bound,constant")?;
    let opt = |x: Option<f64>| x.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{},{:.16e},{},{}",
            r.k,
            r.v,
            r.r,
            r.quantity,
            r.measured,
            opt(r.bound),
            opt(r.constant)
        )?;
    }
    Ok(())
}

/// Fit summaries as JSON records `{quantity, slope, expected_slope, residual}`.
pub fn fits_json(fits: &[ScalingFit]) -> serde_json::Value {
    serde_json::Value::Array(
        fits.iter()
            .map(|f| {
                serde_json::json!({
                    "quantity": f.quantity,
                    "abscissa": f.abscissa,
                    "slope": f.slope,
                    "intercept": f.intercept,
                    "expected_slope": f.expected_slope,
                    "residual": f.residual,
                    "stages": f.stages,
                })
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::{build_schedule, ScheduleOverrides};

    fn stage(log2_r: f64) -> Stage {
        Stage::from_log2_r(2, 0, log2_r).unwrap()
    }

    #[test]
    fn f_v_l2_matches_substitution() {
        let spec = QuadratureSpec::default();
        for lr in [2.0, 6.0, 12.0, 16.0] {
            let r = l2_f_v(&stage(lr), &spec).unwrap();
            assert!((r.measured / r.bound.unwrap() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn g_v_l2_closed_form_example() {
        let st = stage(12.0);
        let r = l2_g_v(&st, &QuadratureSpec::default()).unwrap();
        let expect = (4096f64.powf(-0.5) * 7.0 * hat_l2_sq(2).unwrap() / (2.0 * PI)).sqrt();
        assert!((r.measured / expect - 1.0).abs() < 1e-14);
    }

    #[test]
    fn plancherel_physical_side_agrees() {
        for lr in [6.0, 7.0, 8.0] {
            let r = l2_g_v_physical(&stage(lr), 1e-9).unwrap();
            assert!(
                (r.measured / r.bound.unwrap() - 1.0).abs() < 1e-6,
                "R=2^{lr}: {r:?}"
            );
        }
    }

    #[test]
    fn l1_scalings() {
        let [f, g, _] = l1_norms(&stage(8.0), 1e-6).unwrap();
        assert!((f.measured / f.v - bump_norms().0).abs() < 1e-12);
        assert!(g.measured > 0.0 && g.est_error < 1e-4);
    }

    #[test]
    fn dirichlet_mass_is_period_average() {
        let st = stage(12.0);
        assert_eq!(st.p, 4);
        assert_eq!(dirichlet_kernel(4, 0.0), 9.0);
        let rep = dirichlet_l1(&st, 16);
        let avg = rep.period_mass / (2.0 * PI);
        for &m in &rep.masses {
            assert!((m - avg).abs() <= rep.period_mass / st.d);
        }
        // direct quadrature at two offsets
        let direct = |a: f64| {
            let gl = GaussLegendre::order16();
            let cells = 40000;
            let h = 1.0 / cells as f64;
            (0..cells)
                .map(|j| {
                    gl.integrate(
                        |x| dirichlet_kernel(4, st.d * x).abs(),
                        a + j as f64 * h,
                        a + (j + 1) as f64 * h,
                    )
                })
                .sum::<f64>()
        };
        let c = DirichletCells::new(4);
        for a in [0.0, 0.3] {
            let exact = (c.cumulative(st.d * (a + 1.0)) - c.cumulative(st.d * a)) / st.d;
            assert!((exact - direct(a)).abs() < 1e-6, "{exact} vs {}", direct(a));
        }
    }

    #[test]
    fn hs_at_zero_is_plancherel() {
        let spec = QuadratureSpec::default();
        for lr in [6.0, 10.0] {
            let st = stage(lr);
            let h = hs_norm_h_v(&st, 0.0, &HsConfig::default(), &spec).unwrap();
            let f = l2_f_v(&st, &spec).unwrap().bound.unwrap();
            let g = l2_g_v(&st, &spec).unwrap().measured;
            let expect = (2.0 * PI).powi(2) * f * f * g * g;
            assert!(
                (h.total / expect - 1.0).abs() < 1e-8,
                "{} vs {expect}",
                h.total
            );
            assert!(h.transverse_error < 1e-10);
        }
    }

    #[test]
    fn hs_i2_is_small_and_enveloped() {
        let spec = QuadratureSpec::default();
        let mut last = f64::INFINITY;
        for lr in [6.0, 8.0, 10.0, 12.0] {
            let h = hs_norm_h_v(&stage(lr), 0.25, &HsConfig::default(), &spec).unwrap();
            assert!(h.i2 <= h.i2_envelope, "{} > {}", h.i2, h.i2_envelope);
            let ratio = h.i2 / h.i1;
            assert!(ratio < last);
            last = ratio;
        }
    }

    #[test]
    fn membership_boundary() {
        let sched = build_schedule(2, 0.5, 0.5, 12, &ScheduleOverrides::default()).unwrap();
        let cfg = HsConfig::default();
        let spec = QuadratureSpec::new(1e-8, 1e-14);
        for s in [0.0, 0.2, 0.3] {
            assert!(
                hs_membership(&sched, s, &cfg, &spec).unwrap().holds,
                "s = {s}"
            );
        }
        assert!(!hs_membership(&sched, 1.0 / 3.0, &cfg, &spec).unwrap().holds);
    }
}
