//! Parameter schedule, per-stage lattice data and the counterexample family
//! `f_v`, `G_v`, `h_v = f_v ⊗ G_v` with their Fourier transforms.
//!
//! Scales collapse doubly exponentially (`v_3` already underflows for the
//! default recurrence), so the schedule lives in base-2 logarithms and all
//! tail analytics work on log ratios formed structurally from the recurrence.

use crate::error::{LabError, Result};
use crate::phase::{DoubleDouble, PhaseAccumulator};
use crate::profiles::{bump_eval, FourierTable, FrequencyBump};
use num_complex::Complex64;
use std::io::Write;

/// `γ = n/2`.
#[inline]
pub fn gamma(n: usize) -> f64 {
    n as f64 / 2.0
}

/// `β = 4 + n/2`.
#[inline]
pub fn beta(n: usize) -> f64 {
    4.0 + n as f64 / 2.0
}

/// `μ = max(n, 2 + n/4)`.
#[inline]
pub fn default_mu(n: usize) -> f64 {
    (n as f64).max(2.0 + n as f64 / 4.0)
}

/// Optional replacements for the default recurrence.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScheduleOverrides {
    pub mu: Option<f64>,
    /// `ε_k` for `k = 1..=k_max` (`ε_1` is unused).
    pub eps: Option<Vec<f64>>,
    /// Explicit `v_1, v_2, ...`; replaces the recurrence entirely.
    pub v_list: Option<Vec<f64>>,
    /// Start index `K`; must still satisfy `v_K < δ/4`.
    pub k_start: Option<usize>,
}

/// How the scales were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Recurrence,
    /// Recurrence with a user `μ` or `ε` sequence.
    ModifiedRecurrence,
    /// Explicit list of scales.
    Explicit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub n: usize,
    pub v1: f64,
    pub mu: f64,
    /// `ε_k`, index `k - 1`.
    pub eps: Vec<f64>,
    /// `log2 v_k`, index `k - 1`.
    pub log_v: Vec<f64>,
    /// `log2(v_{k+1} / v_k)`, index `k - 1`; one entry past `k_max` for
    /// recurrence schedules so the infinite tail can be bounded.
    log_ratio: Vec<f64>,
    pub k_start: usize,
    pub k_max: usize,
    pub delta: f64,
    pub kind: ScheduleKind,
}

fn check_unit_interval(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(LabError::InvalidParameter(format!(
            "{name} must lie in (0, 1), got {x}"
        )));
    }
    Ok(())
}

/// Builds the schedule `v_k = ε_k v_{k-1}^μ` in log domain, or validates an
/// explicit list of scales.
pub fn build_schedule(
    n: usize,
    v1: f64,
    delta: f64,
    k_max: usize,
    overrides: &ScheduleOverrides,
) -> Result<Schedule> {
    if n < 2 {
        return Err(LabError::InvalidParameter(format!(
            "dimension n = {n}: the construction requires n >= 2"
        )));
    }
    check_unit_interval("delta", delta)?;
    let nf = n as f64;
    let mu = overrides.mu.unwrap_or_else(|| default_mu(n));
    if !(mu >= 2.0 * gamma(n) && mu >= beta(n) / 2.0) {
        return Err(LabError::InvalidParameter(format!(
            "mu = {mu} violates mu >= 2*gamma = {nf} or mu >= beta/2 = {}",
            beta(n) / 2.0
        )));
    }

    let (kind, log_v, log_ratio, eps, v1) = if let Some(list) = &overrides.v_list {
        if list.is_empty() {
            return Err(LabError::InvalidParameter(
                "explicit v-list is empty".into(),
            ));
        }
        for (i, &v) in list.iter().enumerate() {
            check_unit_interval(&format!("v_{}", i + 1), v)?;
        }
        let log_v: Vec<f64> = list.iter().map(|v| v.log2()).collect();
        let log_ratio: Vec<f64> = log_v.windows(2).map(|w| w[1] - w[0]).collect();
        (
            ScheduleKind::Explicit,
            log_v,
            log_ratio,
            vec![f64::NAN; list.len()],
            list[0],
        )
    } else {
        check_unit_interval("v1", v1)?;
        if k_max == 0 {
            return Err(LabError::InvalidParameter("k_max must be >= 1".into()));
        }
        let eps: Vec<f64> = match &overrides.eps {
            Some(e) => {
                if e.len() < k_max {
                    return Err(LabError::InvalidParameter(format!(
                        "eps override has {} entries, need {k_max}",
                        e.len()
                    )));
                }
                for (i, &x) in e.iter().enumerate().skip(1) {
                    check_unit_interval(&format!("eps_{}", i + 1), x)?;
                }
                e.clone()
            }
            None => (1..=k_max + 2).map(|k| (-(k as f64)).exp2()).collect(),
        };
        let log_eps = |k: usize| -> f64 {
            // 1-based; default sequence beyond an override stays 2^{-k}
            eps.get(k - 1).map(|e| e.log2()).unwrap_or(-(k as f64))
        };
        let mut log_v = Vec::with_capacity(k_max);
        let mut log_ratio = Vec::with_capacity(k_max);
        log_v.push(v1.log2());
        for k in 1..=k_max {
            let lv = log_v[k - 1];
            let r = log_eps(k + 1) + (mu - 1.0) * lv;
            if !r.is_finite() || !(lv + r).is_finite() {
                return Err(LabError::Overflow(format!(
                    "log2 v_{} is not representable (k_max = {k_max})",
                    k + 1
                )));
            }
            log_ratio.push(r);
            if k < k_max {
                log_v.push(lv + r);
            }
        }
        let kind = if overrides.mu.is_some() || overrides.eps.is_some() {
            ScheduleKind::ModifiedRecurrence
        } else {
            ScheduleKind::Recurrence
        };
        let eps = (1..=k_max)
            .map(|k| eps.get(k - 1).copied().unwrap_or((-(k as f64)).exp2()))
            .collect();
        (kind, log_v, log_ratio, eps, v1)
    };
    let k_max = log_v.len();

    for k in 2..=k_max {
        if !(log_ratio[k - 2] < 0.0) {
            return Err(LabError::InvalidParameter(format!(
                "v_{k} is not smaller than v_{}",
                k - 1
            )));
        }
        if !(log_v[k - 1] < -(k as f64)) {
            return Err(LabError::InvalidParameter(format!(
                "v_{k} = 2^{} is not below 2^-{k}",
                log_v[k - 1]
            )));
        }
    }

    let quarter = (delta / 4.0).log2();
    let first = log_v
        .iter()
        .position(|&lv| lv < quarter)
        .map(|i| i + 1)
        .ok_or_else(|| {
            LabError::InvalidParameter(format!(
                "no stage up to k_max = {k_max} has v_k < delta/4 = {}",
                delta / 4.0
            ))
        })?;
    let k_start = match overrides.k_start {
        Some(k) if k < first || k > k_max => {
            return Err(LabError::InvalidParameter(format!(
                "K = {k} outside the admissible range [{first}, {k_max}] (v_K < delta/4)"
            )))
        }
        Some(k) => k,
        None => first,
    };

    if kind == ScheduleKind::Explicit {
        // the two inequalities the cross-term argument uses
        let two_gamma = 2.0 * gamma(n);
        let b = beta(n);
        for k in k_start + 1..=k_max {
            let (prev, cur) = (log_v[k - 2], log_v[k - 1]);
            if cur > two_gamma * prev {
                return Err(LabError::InvalidParameter(format!(
                    "explicit schedule violates v_{k} <= v_{}^{two_gamma}",
                    k - 1
                )));
            }
            if 2.0 * cur > b * prev {
                return Err(LabError::InvalidParameter(format!(
                    "explicit schedule violates v_{k}^2 <= v_{}^{b}",
                    k - 1
                )));
            }
        }
    }

    Ok(Schedule {
        n,
        v1,
        mu,
        eps,
        log_v,
        log_ratio,
        k_start,
        k_max,
        delta,
        kind,
    })
}

/// `Σ_{i>k} v_i` and `Σ_{K<=i<k} v_i^{-β}` with their normalized ratios.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TailSums {
    pub k: usize,
    /// `log2 Σ_{i>k} v_i`, including the analytic bound on stages past
    /// `k_max` for recurrence schedules.
    pub log2_sum_hi: f64,
    /// `log2 Σ_{k<i<=k_max} v_i`; `-inf` when empty.
    pub log2_sum_hi_truncated: f64,
    /// `log2 Σ_{K<=i<k} v_i^{-β}`; `-inf` when empty.
    pub log2_sum_lo: f64,
    /// `Σ_{i>k} v_i / v_{k+1}`.
    pub hi_ratio: f64,
    /// `v_{k-1}^β Σ_{K<=i<k} v_i^{-β}`.
    pub lo_ratio: f64,
    pub beta: f64,
}

impl TailSums {
    pub fn sum_hi(&self) -> f64 {
        self.log2_sum_hi.exp2()
    }

    pub fn sum_lo(&self) -> f64 {
        self.log2_sum_lo.exp2()
    }

    /// `Σ_{i>k} v_i <= 2 v_{k+1}`.
    pub fn hi_bound_holds(&self) -> bool {
        self.hi_ratio <= 2.0
    }

    /// `Σ v_i^{-β} <= v_{k-1}^{-β} / (1 - 2^{-β})`.
    pub fn lo_bound_holds(&self) -> bool {
        self.lo_ratio <= 1.0 / (1.0 - (-self.beta).exp2())
    }
}

fn log2_sum_exp2(terms: impl Iterator<Item = f64>) -> f64 {
    let t: Vec<f64> = terms.collect();
    let m = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + t.iter().map(|x| (x - m).exp2()).sum::<f64>().log2()
}

impl Schedule {
    pub fn is_recurrence(&self) -> bool {
        self.kind != ScheduleKind::Explicit
    }

    /// Watermark carried into every artifact.
    pub fn watermark(&self) -> &'static str {
        match self.kind {
            ScheduleKind::Recurrence => "recurrence",
            ScheduleKind::ModifiedRecurrence => "recurrence-overridden",
            ScheduleKind::Explicit => "explicit-v-override",
        }
    }

    pub fn stages_used(&self) -> std::ops::RangeInclusive<usize> {
        self.k_start..=self.k_max
    }

    /// `log2 v_k` for `1 <= k <= k_max`.
    pub fn log2_v(&self, k: usize) -> f64 {
        self.log_v[k - 1]
    }

    /// `v_k`, possibly underflowing to zero.
    pub fn v(&self, k: usize) -> f64 {
        self.log_v[k - 1].exp2()
    }

    /// `log2(v_{k+1}/v_k)`.
    pub fn log2_ratio(&self, k: usize) -> Option<f64> {
        self.log_ratio.get(k - 1).copied()
    }

    /// `log2(v_j / v_i)` for `i <= j`, summed from structural ratios.
    fn log2_gap(&self, i: usize, j: usize) -> f64 {
        (i..j).map(|m| self.log_ratio[m - 1]).sum()
    }

    pub fn tail_sums(&self, k: usize) -> Result<TailSums> {
        if k < self.k_start || k > self.k_max {
            return Err(LabError::InvalidParameter(format!(
                "tail_sums needs K <= k <= k_max, got k = {k}"
            )));
        }
        let b = beta(self.n);
        let has_next = k < self.k_max || self.log_ratio.len() >= self.k_max;
        // stages k+1..=k_max relative to v_{k+1}
        let (mut hi_ratio, log2_next) = if has_next {
            let log2_next = self.log_v[k - 1] + self.log_ratio[k - 1];
            let terms = (k + 1..=self.k_max).map(|i| self.log2_gap(k + 1, i));
            let trunc = log2_sum_exp2(terms);
            (
                if trunc.is_finite() { trunc.exp2() } else { 0.0 },
                log2_next,
            )
        } else {
            (0.0, f64::NEG_INFINITY)
        };
        let log2_sum_hi_truncated = if k < self.k_max {
            log2_next + hi_ratio.log2()
        } else {
            f64::NEG_INFINITY
        };
        if self.is_recurrence() {
            // v_{i+1}/v_i = ε_{i+1} v_i^{μ-1} shrinks with i, so the stages past
            // k_max are dominated by a geometric series from v_{k_max+1}
            let lv_last = self.log_v[self.k_max - 1] + self.log_ratio[self.k_max - 1];
            let log2_eps_next = -((self.k_max + 2) as f64);
            let log2_rho = log2_eps_next + (self.mu - 1.0) * lv_last;
            let rho = log2_rho.exp2();
            let rel = if k < self.k_max {
                self.log2_gap(k + 1, self.k_max + 1)
            } else {
                0.0
            };
            hi_ratio += rel.exp2() / (1.0 - rho);
        }
        let log2_sum_hi = if hi_ratio > 0.0 {
            log2_next + hi_ratio.log2()
        } else {
            f64::NEG_INFINITY
        };

        let (lo_ratio, log2_sum_lo) = if k > self.k_start {
            let terms = (self.k_start..k).map(|i| b * self.log2_gap(i, k - 1));
            let l = log2_sum_exp2(terms);
            (l.exp2(), -b * self.log_v[k - 2] + l)
        } else {
            (0.0, f64::NEG_INFINITY)
        };
        Ok(TailSums {
            k,
            log2_sum_hi,
            log2_sum_hi_truncated,
            log2_sum_lo,
            hi_ratio,
            lo_ratio,
            beta: b,
        })
    }
}

/// Derived parameters of one construction level.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage {
    pub n: usize,
    pub k: usize,
    pub v: f64,
    pub log2_v: f64,
    /// `R = v^{-2}`.
    pub r: f64,
    pub log2_r: f64,
    /// `D = R^{(n+2)/(2(n+1))}`.
    pub d: f64,
    pub log2_d: f64,
    /// `R/D = R^{n/(2(n+1))}`.
    pub r_over_d: f64,
    pub lattice_lo: i64,
    pub lattice_hi: i64,
    pub p: i64,
}

impl Stage {
    /// Stage with scale `2^{log2_v}`.
    pub fn from_log2_v(n: usize, k: usize, log2_v: f64) -> Result<Self> {
        Self::from_log2_r(n, k, -2.0 * log2_v)
    }

    pub fn from_v(n: usize, v: f64) -> Result<Self> {
        check_unit_interval("v", v)?;
        Self::from_log2_v(n, 0, v.log2())
    }

    /// Stage with `R = 2^{log2_r}`; exponents are formed so that integral
    /// powers of two stay exact.
    pub fn from_log2_r(n: usize, k: usize, log2_r: f64) -> Result<Self> {
        if n < 2 {
            return Err(LabError::InvalidParameter(format!(
                "stage needs n >= 2, got {n}"
            )));
        }
        if !(log2_r > 0.0) {
            return Err(LabError::InvalidParameter(format!(
                "stage needs R > 1, got 2^{log2_r}"
            )));
        }
        if log2_r >= 1000.0 {
            return Err(LabError::Overflow(format!(
                "stage {k}: R = 2^{log2_r:.6e} is not representable"
            )));
        }
        let nf = n as f64;
        let log2_rd = log2_r * nf / (2.0 * (nf + 1.0));
        let log2_d = log2_r - log2_rd;
        let r = log2_r.exp2();
        let d = log2_d.exp2();
        let hi = log2_rd.exp2();
        let lo = hi / 2.0;
        let lattice_lo = lo.floor() as i64 + 1;
        let lattice_hi = hi.ceil() as i64 - 1;
        if lattice_lo > lattice_hi {
            return Err(LabError::DegenerateStage { k, lo, hi });
        }
        let p = (hi / 4.0).round_ties_even() as i64;
        debug_assert!((4.0 * p as f64 - hi).abs() <= 4.0);
        Ok(Self {
            n,
            k,
            v: (-0.5 * log2_r).exp2(),
            log2_v: -0.5 * log2_r,
            r,
            log2_r,
            d,
            log2_d,
            r_over_d: hi,
            lattice_lo,
            lattice_hi,
            p,
        })
    }

    pub fn lattice_count(&self) -> usize {
        (self.lattice_hi - self.lattice_lo + 1) as usize
    }

    pub fn lattice(&self) -> impl Iterator<Item = i64> + Clone {
        self.lattice_lo..=self.lattice_hi
    }

    /// `R^{-(n-1)/4}`.
    pub fn amplitude(&self) -> f64 {
        (-(self.n as f64 - 1.0) / 4.0 * self.log2_r).exp2()
    }
}

/// Builds stage `k` of a schedule.
pub fn make_stage(schedule: &Schedule, k: usize) -> Result<Stage> {
    if k < schedule.k_start || k > schedule.k_max {
        return Err(LabError::InvalidParameter(format!(
            "stage {k} outside [{}, {}]",
            schedule.k_start, schedule.k_max
        )));
    }
    Stage::from_log2_v(schedule.n, k, schedule.log2_v(k))
}

/// Exact comparison of the lattice with the centered block `[2p, 4p]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirichletSplit {
    pub p: i64,
    /// Lattice integers outside `[2p, 4p]`.
    pub extra: Vec<i64>,
    /// Integers of `[2p, 4p]` outside the lattice.
    pub missing: Vec<i64>,
}

impl DirichletSplit {
    /// Number of boundary terms, the `O(1)` remainder.
    pub fn remainder_terms(&self) -> usize {
        self.extra.len() + self.missing.len()
    }
}

pub fn dirichlet_reduce(stage: &Stage) -> DirichletSplit {
    let (a, b) = (2 * stage.p, 4 * stage.p);
    let extra = stage.lattice().filter(|l| *l < a || *l > b).collect();
    let missing = (a..=b)
        .filter(|l| *l < stage.lattice_lo || *l > stage.lattice_hi)
        .collect();
    DirichletSplit {
        p: stage.p,
        extra,
        missing,
    }
}

/// A point `(x_1, x')` of `R^n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x1: f64,
    pub xprime: Vec<f64>,
}

impl Point {
    pub fn new(x1: f64, xprime: Vec<f64>) -> Self {
        Self { x1, xprime }
    }

    pub fn dim(&self) -> usize {
        1 + self.xprime.len()
    }
}

#[inline]
fn cis(theta: f64) -> Complex64 {
    Complex64::from_polar(1.0, theta)
}

/// `f_v(x_1) = e^{-i x_1 R} ǧ(x_1/v)`; exactly zero for `|x_1| >= v`.
pub fn f_v_eval(stage: &Stage, x1: f64) -> Complex64 {
    if x1.abs() >= stage.v {
        return Complex64::new(0.0, 0.0);
    }
    let mut acc = PhaseAccumulator::new();
    acc.add_product(-x1, stage.r);
    let (h, t) = acc.reduced();
    cis(h + t) * bump_eval(x1 / stage.v)
}

/// `f̂_v(ξ_1) = v g(v ξ_1 + 1/v)`, evaluated as `v g(v (ξ_1 + R))`.
pub fn f_v_hat(stage: &Stage, xi1: f64) -> f64 {
    stage.v * FourierTable::standard().eval(stage.v * (xi1 + stage.r))
}

/// `Σ_{l in lattice} e^{i D l y}` with compensated phases.
pub fn lattice_sum(stage: &Stage, y: f64) -> Complex64 {
    let dy = DoubleDouble::product(stage.d, y);
    stage
        .lattice()
        .map(|l| {
            let th = dy.mul_f64(l as f64).rem_two_pi();
            cis(th.hi + th.lo)
        })
        .sum()
}

/// `G_v(x') = R^{-(n-1)/4} Π_j ψ(x_j) Σ_l e^{i D l x_j}`.
pub fn g_v_eval(stage: &Stage, xprime: &[f64]) -> Result<Complex64> {
    check_dim(stage, xprime)?;
    let bump = FrequencyBump::standard(stage.n)?;
    let table = FourierTable::standard();
    let mut acc = Complex64::new(stage.amplitude(), 0.0);
    for &x in xprime {
        acc *= bump.psi_fast(x, table) * lattice_sum(stage, x);
    }
    Ok(acc)
}

fn check_dim(stage: &Stage, xprime: &[f64]) -> Result<()> {
    if xprime.len() + 1 != stage.n {
        return Err(LabError::InvalidParameter(format!(
            "x' has {} coordinates, dimension n = {} needs {}",
            xprime.len(),
            stage.n,
            stage.n - 1
        )));
    }
    Ok(())
}

/// `h_v(x) = f_v(x_1) G_v(x')`.
pub fn h_v_eval(stage: &Stage, point: &Point) -> Result<Complex64> {
    let f = f_v_eval(stage, point.x1);
    if f == Complex64::new(0.0, 0.0) {
        check_dim(stage, &point.xprime)?;
        return Ok(f);
    }
    Ok(f * g_v_eval(stage, &point.xprime)?)
}

/// `Ĝ_v(ξ') = R^{-(n-1)/4} Π_j Σ_l ψ̂(ξ_j - D l)`.
pub fn g_v_hat(stage: &Stage, xiprime: &[f64]) -> Result<f64> {
    check_dim(stage, xiprime)?;
    let bump = FrequencyBump::standard(stage.n)?;
    let mut acc = stage.amplitude();
    for &xi in xiprime {
        let s = if stage.d > 2.0 * bump.radius {
            // translates are disjoint: only the nearest lattice point can hit
            let l = (xi / stage.d)
                .round()
                .clamp(stage.lattice_lo as f64, stage.lattice_hi as f64);
            bump.eval_hat(xi - stage.d * l)
        } else {
            stage
                .lattice()
                .map(|l| bump.eval_hat(xi - stage.d * l as f64))
                .sum()
        };
        acc *= s;
        if acc == 0.0 {
            break;
        }
    }
    Ok(acc)
}

/// `Σ_{k=K}^{k_max} h_{v_k}(x)`; exactly zero for `|x_1| >= v_K`.
pub fn h_truncated_eval(schedule: &Schedule, point: &Point) -> Result<Complex64> {
    if point.dim() != schedule.n {
        return Err(LabError::InvalidParameter(format!(
            "point has dimension {}, schedule has n = {}",
            point.dim(),
            schedule.n
        )));
    }
    let ax = point.x1.abs().log2();
    let mut acc = Complex64::new(0.0, 0.0);
    for k in schedule.stages_used() {
        // supports are nested: once |x1| >= v_k every later stage vanishes
        if ax >= schedule.log2_v(k) {
            break;
        }
        acc += h_v_eval(&make_stage(schedule, k)?, point)?;
    }
    Ok(acc)
}

/// Writes `k, v, R, D, lattice_lo, lattice_hi, p`.
pub fn write_stages_csv<W: Write>(mut w: W, stages: &[Stage]) -> Result<()> {
    writeln!(w, "k,v,R,D,lattice_lo,lattice_hi,p")?;
    for s in stages {
        writeln!(
            w,
            "{},{:.16e},{:.16e},{:.16e},{},{},{}",
            s.k, s.v, s.r, s.d, s.lattice_lo, s.lattice_hi, s.p
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule(n: usize, v1: f64, k_max: usize) -> Schedule {
        build_schedule(n, v1, 0.5, k_max, &ScheduleOverrides::default()).unwrap()
    }

    #[test]
    fn recurrence_second_scale() {
        let s = default_schedule(2, 0.5, 4);
        assert_eq!(s.mu, 2.5);
        assert_eq!(s.log2_v(2), -4.5);
        assert!((s.v(2) - 0.044_194_173_824_159_22).abs() < 1e-15);
        assert_eq!(default_mu(4), 4.0);
        assert_eq!(default_mu(8), 8.0);
        assert_eq!(default_mu(3), 3.0);
    }

    #[test]
    fn start_index_is_first_scale_below_quarter_delta() {
        let s = default_schedule(2, 0.5, 4);
        // v1 = 0.5 > 0.125, v2 ≈ 0.044
        assert_eq!(s.k_start, 2);
        let s = build_schedule(2, 0.1, 0.5, 3, &ScheduleOverrides::default()).unwrap();
        assert_eq!(s.k_start, 1);
    }

    #[test]
    fn rejects_bad_parameters() {
        let o = ScheduleOverrides::default();
        assert!(matches!(
            build_schedule(2, 1.0, 0.5, 3, &o),
            Err(LabError::InvalidParameter(_))
        ));
        assert!(matches!(
            build_schedule(2, 0.5, 0.0, 3, &o),
            Err(LabError::InvalidParameter(_))
        ));
        assert!(matches!(
            build_schedule(1, 0.5, 0.5, 3, &o),
            Err(LabError::InvalidParameter(_))
        ));
        let low_mu = ScheduleOverrides {
            mu: Some(2.0),
            ..Default::default()
        };
        assert!(build_schedule(2, 0.5, 0.5, 3, &low_mu).is_err());
    }

    #[test]
    fn sixty_four_stages_stay_finite() {
        for n in [2, 3, 4, 8] {
            let s = default_schedule(n, 0.5, 64);
            assert!(s.log_v.iter().all(|x| x.is_finite()));
            for k in 2..=64 {
                assert!(s.log2_v(k) < -(k as f64));
            }
        }
        assert!(matches!(
            build_schedule(8, 0.5, 0.5, 400, &ScheduleOverrides::default()),
            Err(LabError::Overflow(_))
        ));
    }

    #[test]
    fn explicit_schedule_checks_consecutive_inequalities() {
        let bad = ScheduleOverrides {
            v_list: Some(vec![0.12, 0.02, 0.004]),
            ..Default::default()
        };
        assert!(build_schedule(2, 0.5, 0.5, 3, &bad).is_err());
        let good = ScheduleOverrides {
            v_list: Some(vec![0.124, 0.005, 1.5e-6]),
            ..Default::default()
        };
        let s = build_schedule(2, 0.5, 0.5, 3, &good).unwrap();
        assert_eq!(s.kind, ScheduleKind::Explicit);
        assert_eq!(s.k_start, 1);
        assert_eq!(s.watermark(), "explicit-v-override");
    }

    #[test]
    fn tail_sums_two_stage_and_bounds() {
        let s = default_schedule(2, 0.1, 6);
        let t = s.tail_sums(s.k_start + 1).unwrap();
        let expect = -beta(2) * s.log2_v(s.k_start);
        assert!((t.log2_sum_lo - expect).abs() < 1e-12 * expect.abs());
        for n in [2, 3, 4, 8] {
            let s = default_schedule(n, 0.5, 64);
            for k in s.stages_used() {
                let t = s.tail_sums(k).unwrap();
                assert!(
                    t.hi_bound_holds() && t.lo_bound_holds(),
                    "n={n} k={k} {t:?}"
                );
            }
        }
    }

    #[test]
    fn stage_examples() {
        let s = Stage::from_log2_r(2, 0, 12.0).unwrap();
        assert_eq!((s.d, s.r_over_d), (256.0, 16.0));
        assert_eq!(
            (s.lattice_lo, s.lattice_hi, s.lattice_count(), s.p),
            (9, 15, 7, 4)
        );
        let s = Stage::from_log2_r(2, 0, 6.0).unwrap();
        assert_eq!((s.lattice_lo, s.lattice_hi, s.p), (3, 3, 1));
        // integer enumeration oracle for n = 3, R = 10^4
        let s = Stage::from_log2_r(3, 0, 1e4f64.log2()).unwrap();
        let d = 1e4f64.powf(5.0 / 8.0);
        let brute = (1..200)
            .filter(|&l| 1e4 / (2.0 * d) < l as f64 && (l as f64) < 1e4 / d)
            .count();
        assert_eq!(s.lattice_count(), brute);
        assert_eq!(brute, 16);
        // exact counts across dyadic R, n = 2
        let counts: Vec<usize> = (6..=16)
            .map(|e| Stage::from_log2_r(2, 0, e as f64).unwrap().lattice_count())
            .collect();
        assert_eq!(counts, vec![1, 3, 3, 3, 5, 6, 7, 10, 13, 15, 20]);
    }

    #[test]
    fn degenerate_stage_is_reported() {
        // R/D = 2 leaves the open interval (1, 2) empty
        assert!(matches!(
            Stage::from_log2_r(2, 0, 3.0),
            Err(LabError::DegenerateStage { .. })
        ));
    }

    #[test]
    fn dirichlet_remainder_is_bounded() {
        for e in 6..=40 {
            let s = Stage::from_log2_r(2, 0, e as f64 * 0.75 + 2.0).unwrap();
            let split = dirichlet_reduce(&s);
            assert!(split.remainder_terms() <= 8, "{e}: {split:?}");
            assert!((4 * s.p) as f64 - s.r_over_d <= 4.0);
        }
    }

    #[test]
    fn f_v_basic_values() {
        let s = Stage::from_v(2, 0.125).unwrap();
        assert_eq!(f_v_eval(&s, 0.0), Complex64::new(1.0, 0.0));
        assert_eq!(f_v_eval(&s, 0.25), Complex64::new(0.0, 0.0));
        assert!((f_v_eval(&s, 0.05).norm() - 1.0).abs() < 1e-15);
        assert!((f_v_hat(&s, -s.r) - 0.125 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn g_v_peak_and_lattice_resonance() {
        let s = Stage::from_log2_r(2, 0, 12.0).unwrap();
        let g0 = g_v_eval(&s, &[0.0]).unwrap();
        assert!((g0.re - 4096f64.powf(-0.25) * 7.0).abs() < 1e-13);
        let x = 2.0 * std::f64::consts::PI / s.d;
        let bump = FrequencyBump::standard(2).unwrap();
        let expect = 0.125 * bump.psi_fast(x, FourierTable::standard()) * 7.0;
        let got = g_v_eval(&s, &[x]).unwrap();
        assert!((got - expect).norm() < 1e-13);
    }

    #[test]
    fn g_v_hat_support() {
        let s = Stage::from_log2_r(2, 0, 12.0).unwrap();
        let bump = FrequencyBump::standard(2).unwrap();
        assert!((g_v_hat(&s, &[256.0 * 9.0]).unwrap() - 0.125 * bump.eval_hat(0.0)).abs() < 1e-15);
        assert_eq!(g_v_hat(&s, &[256.0 * 9.0 + 1.5]).unwrap(), 0.0);
        for i in 0..4000 {
            let xi = i as f64;
            if g_v_hat(&s, &[xi]).unwrap() != 0.0 {
                assert!(xi >= s.r / 2.0 - 1.0 && xi <= s.r + 1.0);
            }
        }
    }

    #[test]
    fn truncated_sum_support_and_nesting() {
        let o = ScheduleOverrides {
            v_list: Some(vec![0.124, 0.005, 1.5e-6]),
            ..Default::default()
        };
        let s = build_schedule(2, 0.5, 0.5, 3, &o).unwrap();
        let far = Point::new(0.2, vec![0.0]);
        assert_eq!(
            h_truncated_eval(&s, &far).unwrap(),
            Complex64::new(0.0, 0.0)
        );
        let mid = Point::new(0.01, vec![0.3]);
        let one = h_v_eval(&make_stage(&s, 1).unwrap(), &mid).unwrap();
        assert_eq!(h_truncated_eval(&s, &mid).unwrap(), one);
    }
}
