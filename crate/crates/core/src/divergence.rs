//! Localization failure at desk scale: time windows, the Monte Carlo search
//! for points where the stage factors stay large, the cross-term ledger and
//! per-point certificates.

use crate::construction::{beta, gamma, h_truncated_eval, make_stage, Point, Schedule, Stage};
use crate::envelope::{EnvelopeConstants, SLACK};
use crate::error::{LabError, Result};
use crate::profiles::bump_eval;
use crate::propagator::{propagate_f_v_auto, propagate_g_v_auto, propagate_h_stages, EvalMode};
use crate::quad::QuadratureSpec;
use crate::stats::{wilson_interval, Z95};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Admissible times `t = x1/(2R) + τ`, `|τ| < R^{-3/2}/10`, `|t| < c/R`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WindowSpec {
    pub t_center: f64,
    pub tau_max: f64,
    pub cap: f64,
    pub empty: bool,
}

impl WindowSpec {
    pub fn contains(&self, t: f64) -> bool {
        (t - self.t_center).abs() < self.tau_max && t.abs() < self.cap
    }

    /// Interior uniform grid of `m` times, dropping points beyond the cap.
    pub fn grid(&self, m: usize) -> Vec<f64> {
        let m = m.max(1);
        (0..m)
            .map(|j| self.t_center + self.tau_max * (2.0 * (j as f64 + 0.5) / m as f64 - 1.0))
            .filter(|&t| self.contains(t))
            .collect()
    }
}

pub fn time_window(stage: &Stage, x1: f64, c_window: f64) -> WindowSpec {
    let t_center = x1 / (2.0 * stage.r);
    let tau_max = (-1.5 * stage.log2_r).exp2() / 10.0;
    let cap = c_window / stage.r;
    WindowSpec {
        t_center,
        tau_max,
        cap,
        empty: t_center.abs() - tau_max >= cap,
    }
}

/// Grid maximum of `f` followed by golden-section refinement between the
/// neighbours of the best node.
fn maximize<F: Fn(f64) -> Result<f64>>(grid: &[f64], refine: usize, f: F) -> Result<(f64, f64)> {
    if grid.is_empty() {
        return Err(LabError::InvalidParameter("empty time grid".into()));
    }
    let vals = grid.iter().map(|&t| f(t)).collect::<Result<Vec<_>>>()?;
    let (j, _) =
        vals.iter().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |a, (i, &v)| if v > a.1 { (i, v) } else { a },
        );
    let (mut best_t, mut best_v) = (grid[j], vals[j]);
    if refine == 0 || grid.len() < 2 {
        return Ok((best_t, best_v));
    }
    let mut a = grid[j.saturating_sub(1)];
    let mut b = grid[(j + 1).min(grid.len() - 1)];
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    for _ in 0..refine {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d)?;
        }
    }
    for (t, v) in [(c, fc), (d, fd)] {
        if v > best_v {
            best_t = t;
            best_v = v;
        }
    }
    Ok((best_t, best_v))
}

/// Search and certificate settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub samples: usize,
    pub seed: u64,
    pub tau_grid: usize,
    pub refine: usize,
    pub c_window: f64,
    pub delta: f64,
    /// Fixed thresholds; `None` calibrates at the first stage.
    pub c0_f: Option<f64>,
    pub c0_g: Option<f64>,
    pub c0_product: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 7,
            tau_grid: 64,
            refine: 12,
            c_window: 1.0,
            delta: 0.5,
            c0_f: None,
            c0_g: None,
            c0_product: None,
        }
    }
}

/// Uniform samples of `B(0;1) ∩ {|x1| > δ/2}`; sample `i` draws from its own
/// ChaCha stream so the set does not depend on evaluation order.
pub fn sample_points(n: usize, delta: f64, samples: usize, seed: u64) -> Vec<Point> {
    (0..samples)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            loop {
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let r2: f64 = x.iter().map(|c| c * c).sum();
                if r2 < 1.0 && x[0].abs() > delta / 2.0 {
                    return Point::new(x[0], x[1..].to_vec());
                }
            }
        })
        .collect()
}

/// Lebesgue measure of `B(0;1) ∩ {|x1| > δ/2}` in `R^n`.
pub fn domain_measure(n: usize, delta: f64) -> f64 {
    // V_m = 2π/m V_{m-2}
    let mut vol = vec![1.0, 2.0];
    for m in 2..=n {
        let v = 2.0 * std::f64::consts::PI / m as f64 * vol[m - 2];
        vol.push(v);
    }
    let a = delta / 2.0;
    let m = (n - 1) as f64;
    let gl = crate::quad::GaussLegendre::order16();
    let strip = vol[n - 1] * gl.integrate(|x| (1.0 - x * x).powf(m / 2.0), -a, a);
    vol[n] - strip
}

/// Best `|S_t f_v(x1)|` over the window with its profile against `|ǧ(2τR^{3/2})|`.
#[derive(Clone, Debug, Serialize)]
pub struct LowerBound {
    pub t_best: f64,
    pub value: f64,
    /// `(τ, measured, predictor)` on the grid.
    pub profile: Vec<(f64, f64, f64)>,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

pub fn lower_bound_f(
    stage: &Stage,
    x1: f64,
    cfg: &SearchConfig,
    spec: &QuadratureSpec,
) -> Result<LowerBound> {
    let w = time_window(stage, x1, cfg.c_window);
    if w.empty {
        return Err(LabError::InvalidParameter(format!(
            "empty time window at x1 = {x1}, R = {}",
            stage.r
        )));
    }
    let grid = w.grid(cfg.tau_grid);
    let r32 = (1.5 * stage.log2_r).exp2();
    let mut profile = Vec::with_capacity(grid.len());
    for &t in &grid {
        let m = propagate_f_v_auto(stage, t, x1, spec)?.abs();
        let tau = t - w.t_center;
        profile.push((tau, m, bump_eval(2.0 * tau * r32).abs()));
    }
    let (t_best, value) = maximize(&grid, cfg.refine, |t| {
        Ok(propagate_f_v_auto(stage, t, x1, spec)?.abs())
    })?;
    let ratios: Vec<f64> = profile
        .iter()
        .filter(|p| p.2 > 0.0)
        .map(|p| p.1 / p.2)
        .collect();
    Ok(LowerBound {
        t_best,
        value,
        ratio_min: ratios.iter().cloned().fold(f64::INFINITY, f64::min),
        ratio_max: ratios.iter().cloned().fold(0.0, f64::max),
        profile,
    })
}

/// Best window value of one sample at one stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleBest {
    pub index: usize,
    pub x: Vec<f64>,
    pub t: f64,
    pub value: f64,
    pub passes: bool,
}

/// Empirical stand-in for the set where the `G` factor is large.
#[derive(Clone, Debug, Serialize)]
pub struct EmpiricalSet {
    pub k: usize,
    pub samples: usize,
    pub threshold: f64,
    pub passing: Vec<SampleBest>,
    pub fraction: f64,
    pub wilson: (f64, f64),
    /// Fraction times the measure of the sampling domain.
    pub measure: f64,
}

impl EmpiricalSet {
    pub fn passing_indices(&self) -> Vec<usize> {
        self.passing.iter().map(|p| p.index).collect()
    }
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, U: Send, F: Fn(usize, &T) -> U + Sync + Send>(xs: &[T], f: F) -> Vec<U> {
    use rayon::prelude::*;
    xs.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, U, F: Fn(usize, &T) -> U>(xs: &[T], f: F) -> Vec<U> {
    xs.iter().enumerate().map(|(i, x)| f(i, x)).collect()
}

/// Per-sample maxima of `|S_t G_v(x')|` over each sample's window.
pub fn g_window_maxima(
    stage: &Stage,
    points: &[Point],
    cfg: &SearchConfig,
    spec: &QuadratureSpec,
) -> Result<Vec<SampleBest>> {
    par_map(points, |i, p| {
        let w = time_window(stage, p.x1, cfg.c_window);
        let grid = w.grid(cfg.tau_grid);
        let (t, value) = maximize(&grid, cfg.refine, |t| {
            Ok(propagate_g_v_auto(stage, t, &p.xprime, spec)?.abs())
        })?;
        let mut x = vec![p.x1];
        x.extend_from_slice(&p.xprime);
        Ok(SampleBest {
            index: i,
            x,
            t,
            value,
            passes: false,
        })
    })
    .into_iter()
    .collect()
}

fn empirical(
    k: usize,
    n: usize,
    delta: f64,
    mut all: Vec<SampleBest>,
    threshold: f64,
) -> EmpiricalSet {
    let samples = all.len();
    for s in all.iter_mut() {
        s.passes = s.value >= threshold;
    }
    let passing: Vec<SampleBest> = all.into_iter().filter(|s| s.passes).collect();
    let fraction = if samples == 0 {
        0.0
    } else {
        passing.len() as f64 / samples as f64
    };
    EmpiricalSet {
        k,
        samples,
        threshold,
        wilson: wilson_interval(passing.len(), samples, Z95),
        measure: fraction * domain_measure(n, delta),
        passing,
        fraction,
    }
}

/// Monte Carlo estimate of the set where `max_t |S_t G_v(x')| >= threshold`.
pub fn search_ek(
    stage: &Stage,
    points: &[Point],
    threshold: f64,
    cfg: &SearchConfig,
    spec: &QuadratureSpec,
) -> Result<EmpiricalSet> {
    let all = g_window_maxima(stage, points, cfg, spec)?;
    Ok(empirical(stage.k, stage.n, cfg.delta, all, threshold))
}

fn median(xs: &[f64]) -> f64 {
    let mut v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Thresholds used by the search and the certificates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub c0_f: f64,
    pub c0_g: f64,
    pub c0_product: f64,
    /// Whether any value came from the calibration stage.
    pub calibrated: bool,
}

/// Joint best of `|S_t f_v(x1)| |S_t G_v(x')|` over the window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JointBest {
    pub t: f64,
    pub abs_f: f64,
    pub abs_g: f64,
    pub product: f64,
}

pub fn joint_best(
    stage: &Stage,
    p: &Point,
    cfg: &SearchConfig,
    spec: &QuadratureSpec,
) -> Result<JointBest> {
    let w = time_window(stage, p.x1, cfg.c_window);
    if w.empty {
        return Err(LabError::InvalidParameter(format!(
            "empty time window at x1 = {}",
            p.x1
        )));
    }
    let grid = w.grid(cfg.tau_grid);
    let prod = |t: f64| -> Result<f64> {
        let f = propagate_f_v_auto(stage, t, p.x1, spec)?.abs();
        let g = propagate_g_v_auto(stage, t, &p.xprime, spec)?.abs();
        Ok(f * g)
    };
    let (t, _) = maximize(&grid, cfg.refine, prod)?;
    let abs_f = propagate_f_v_auto(stage, t, p.x1, spec)?.abs();
    let abs_g = propagate_g_v_auto(stage, t, &p.xprime, spec)?.abs();
    Ok(JointBest {
        t,
        abs_f,
        abs_g,
        product: abs_f * abs_g,
    })
}

/// Thresholds: configured values, otherwise half the median over `points`
/// at the calibration stage.
pub fn calibrate_thresholds(
    stage: &Stage,
    points: &[Point],
    cfg: &SearchConfig,
    spec: &QuadratureSpec,
) -> Result<Thresholds> {
    if let (Some(f), Some(g), Some(p)) = (cfg.c0_f, cfg.c0_g, cfg.c0_product) {
        return Ok(Thresholds {
            c0_f: f,
            c0_g: g,
            c0_product: p,
            calibrated: false,
        });
    }
    let joint: Vec<Result<(f64, f64)>> = par_map(points, |_, p| {
        let lb = lower_bound_f(stage, p.x1, cfg, spec)?;
        let j = joint_best(stage, p, cfg, spec)?;
        Ok((lb.value, j.product))
    });
    let joint = joint.into_iter().collect::<Result<Vec<_>>>()?;
    let gmax = g_window_maxima(stage, points, cfg, spec)?;
    let fs: Vec<f64> = joint.iter().map(|j| j.0).collect();
    let ps: Vec<f64> = joint.iter().map(|j| j.1).collect();
    let gs: Vec<f64> = gmax.iter().map(|s| s.value).collect();
    Ok(Thresholds {
        c0_f: cfg.c0_f.unwrap_or(0.5 * median(&fs)),
        c0_g: cfg.c0_g.unwrap_or(0.5 * median(&gs)),
        c0_product: cfg.c0_product.unwrap_or(0.5 * median(&ps)),
        calibrated: true,
    })
}

/// Analytic bound on `Σ_{i≠k} |S_t h_{v_i}(x)|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CrossBound {
    /// `C₁₃ Σ_{i>k} v_i |t|^{-γ}`.
    pub upper: f64,
    /// `C₁₄ |t| Σ_{K<=i<k} v_i^{-β}`.
    pub lower: f64,
    pub total: f64,
    /// `C₁₃ (8/δ)^γ 2ε_{k+1} + C₁₄ ε_k²/(1-2^{-β})` for recurrence schedules.
    pub tightened: Option<f64>,
    pub log2_total: f64,
}

/// Cross-term bound at stage `k` and time `t`, in log domain.
pub fn cross_term_bound(
    schedule: &Schedule,
    k: usize,
    t: f64,
    consts: &EnvelopeConstants,
) -> Result<CrossBound> {
    let n = schedule.n;
    let ts = schedule.tail_sums(k)?;
    let lt = t.abs().log2();
    let log2_up = consts.h_fine.log2() + ts.log2_sum_hi - gamma(n) * lt;
    let log2_lo = consts.h_coarse.log2() + lt + ts.log2_sum_lo;
    let m = log2_up.max(log2_lo);
    let log2_total = if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((log2_up - m).exp2() + (log2_lo - m).exp2()).log2()
    };
    let tightened = if schedule.is_recurrence() {
        let b = beta(n);
        let eps_next = schedule
            .eps
            .get(k)
            .copied()
            .unwrap_or((-((k + 1) as f64)).exp2());
        let eps_k = schedule.eps[k - 1];
        let up = consts.h_fine * (8.0 / schedule.delta).powf(gamma(n)) * 2.0 * eps_next;
        let lo = if k > schedule.k_start {
            consts.h_coarse * eps_k * eps_k / (1.0 - (-b).exp2())
        } else {
            0.0
        };
        Some(up + lo)
    } else {
        None
    };
    Ok(CrossBound {
        upper: log2_up.exp2(),
        lower: log2_lo.exp2(),
        total: log2_total.exp2(),
        tightened,
        log2_total,
    })
}

/// One stage of a certificate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub k: usize,
    pub v: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub t: f64,
    #[serde(rename = "absSf")]
    pub abs_sf: f64,
    #[serde(rename = "absSG")]
    pub abs_sg: f64,
    #[serde(rename = "absProduct")]
    pub abs_product: f64,
    #[serde(rename = "crossMeasured")]
    pub cross_measured: f64,
    #[serde(rename = "crossBound")]
    pub cross_bound: f64,
    pub valid: bool,
    /// Evaluation modes of the off-stage terms (`majorant` marks upper bounds).
    #[serde(rename = "crossModes")]
    pub cross_modes: Vec<String>,
    /// Measured cross term within the analytic bound (×1.05).
    #[serde(rename = "boundHolds")]
    pub bound_holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub x: Vec<f64>,
    pub stages: Vec<StageRecord>,
    #[serde(rename = "supportMargin")]
    pub support_margin: f64,
    #[serde(rename = "scheduleHash")]
    pub schedule_hash: String,
    pub seed: u64,
    pub valid: bool,
    #[serde(rename = "failingStage")]
    pub failing_stage: Option<usize>,
    /// `h(x)` from the construction; zero outside the support.
    #[serde(rename = "hAtX")]
    pub h_at_x: f64,
}

/// SHA-256 over `n`, `δ`, `K` and the `log2 v_k` of the stages used.
pub fn schedule_hash(schedule: &Schedule) -> String {
    use sha2::{Digest, Sha256};
    let mut text = format!(
        "n={};delta={:?};K={};log2_v=",
        schedule.n, schedule.delta, schedule.k_start
    );
    for k in schedule.stages_used() {
        text.push_str(&format!("{:?},", schedule.log2_v(k)));
    }
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Stages `K..=k_max` of a schedule.
pub fn schedule_stages(schedule: &Schedule) -> Result<Vec<Stage>> {
    schedule
        .stages_used()
        .map(|k| make_stage(schedule, k))
        .collect()
}

/// Certificate at one point: joint best time per stage, the off-stage sum at
/// that time and its analytic bound.
#[allow(clippy::too_many_arguments)]
pub fn divergence_certificate(
    schedule: &Schedule,
    stages: &[Stage],
    point: &Point,
    thresholds: &Thresholds,
    consts: &EnvelopeConstants,
    cfg: &SearchConfig,
    schedule_hash: &str,
    spec: &QuadratureSpec,
) -> Result<Certificate> {
    if point.x1.abs() <= cfg.delta / 2.0 {
        return Err(LabError::InvalidParameter(format!(
            "certificate needs |x1| > delta/2 = {}, got {}",
            cfg.delta / 2.0,
            point.x1
        )));
    }
    let h = h_truncated_eval(schedule, point)?;
    let v_k = stages.iter().map(|s| s.v).fold(0.0, f64::max);
    let support_margin = point.x1.abs() - v_k;
    let mut records = Vec::with_capacity(stages.len());
    for st in stages {
        let j = joint_best(st, point, cfg, spec)?;
        let he = propagate_h_stages(stages, j.t, point, spec)?;
        let cross = he.cross_sum(st.k);
        let bound = cross_term_bound(schedule, st.k, j.t, consts)?;
        let cross_modes = he
            .terms
            .iter()
            .filter(|s| s.k != st.k)
            .map(|s| {
                if s.term.mode == EvalMode::Majorant || s.g.mode == EvalMode::Majorant {
                    "majorant".to_string()
                } else {
                    format!("{}*{}", s.f.mode.as_str(), s.g.mode.as_str())
                }
            })
            .collect();
        let valid = j.product >= thresholds.c0_product
            && cross <= 0.5 * thresholds.c0_product
            && support_margin > 0.0
            && h == Complex64::new(0.0, 0.0);
        records.push(StageRecord {
            k: st.k,
            v: st.v,
            r: st.r,
            t: j.t,
            abs_sf: j.abs_f,
            abs_sg: j.abs_g,
            abs_product: j.product,
            cross_measured: cross,
            cross_bound: bound.total,
            valid,
            cross_modes,
            bound_holds: cross <= bound.total * SLACK,
        });
    }
    let failing_stage = records.iter().find(|r| !r.valid).map(|r| r.k);
    let mut x = vec![point.x1];
    x.extend_from_slice(&point.xprime);
    Ok(Certificate {
        x,
        valid: failing_stage.is_none(),
        stages: records,
        support_margin,
        schedule_hash: schedule_hash.to_string(),
        seed: cfg.seed,
        failing_stage,
        h_at_x: h.norm(),
    })
}

/// Certificates for every sample, in sample order.
#[allow(clippy::too_many_arguments)]
pub fn certify_points(
    schedule: &Schedule,
    stages: &[Stage],
    points: &[Point],
    thresholds: &Thresholds,
    consts: &EnvelopeConstants,
    cfg: &SearchConfig,
    schedule_hash: &str,
    spec: &QuadratureSpec,
) -> Result<Vec<Certificate>> {
    par_map(points, |_, p| {
        divergence_certificate(
            schedule,
            stages,
            p,
            thresholds,
            consts,
            cfg,
            schedule_hash,
            spec,
        )
    })
    .into_iter()
    .collect()
}

/// One row of the finite limsup surrogate.
#[derive(Clone, Debug, Serialize)]
pub struct TailRow {
    /// Union over stages `j >= from`.
    pub from: usize,
    pub fraction: f64,
    pub wilson: (f64, f64),
}

#[derive(Clone, Debug, Serialize)]
pub struct LimsupReport {
    pub label: String,
    pub samples: usize,
    pub stages: Vec<usize>,
    pub intersection_fraction: f64,
    pub intersection_wilson: (f64, f64),
    pub tails: Vec<TailRow>,
    /// Intersection over the available tails (equals the last tail union).
    pub limsup_fraction: f64,
    pub limsup_wilson: (f64, f64),
    pub certified_fraction: Option<f64>,
    pub certified_wilson: Option<(f64, f64)>,
}

/// Finite truncation of `∩_k ∪_{j>=k} F_j` over sets drawn on one sample set.
pub fn limsup_report(
    sets: &[EmpiricalSet],
    certificates: Option<&[Certificate]>,
) -> Result<LimsupReport> {
    if sets.is_empty() {
        return Err(LabError::InvalidParameter(
            "limsup report needs at least one stage".into(),
        ));
    }
    let samples = sets[0].samples;
    if sets.iter().any(|s| s.samples != samples) {
        return Err(LabError::InvalidParameter(
            "stage sets were drawn on different sample sets".into(),
        ));
    }
    let member: Vec<Vec<bool>> = sets
        .iter()
        .map(|s| {
            let mut m = vec![false; samples];
            for i in s.passing_indices() {
                m[i] = true;
            }
            m
        })
        .collect();
    let count = |pred: &dyn Fn(usize) -> bool| (0..samples).filter(|&i| pred(i)).count();
    let inter = count(&|i| member.iter().all(|m| m[i]));
    let mut tails = Vec::with_capacity(sets.len());
    let mut tail_members: Vec<Vec<bool>> = Vec::new();
    for from in 0..sets.len() {
        let u: Vec<bool> = (0..samples)
            .map(|i| member[from..].iter().any(|m| m[i]))
            .collect();
        let c = u.iter().filter(|&&b| b).count();
        tails.push(TailRow {
            from: sets[from].k,
            fraction: c as f64 / samples.max(1) as f64,
            wilson: wilson_interval(c, samples, Z95),
        });
        tail_members.push(u);
    }
    let lim = count(&|i| tail_members.iter().all(|m| m[i]));
    let (certified_fraction, certified_wilson) = match certificates {
        Some(c) => {
            let v = c.iter().filter(|c| c.valid).count();
            (
                Some(v as f64 / c.len().max(1) as f64),
                Some(wilson_interval(v, c.len(), Z95)),
            )
        }
        None => (None, None),
    };
    Ok(LimsupReport {
        label: format!(
            "finite truncation over {} stages of the limsup set",
            sets.len()
        ),
        samples,
        stages: sets.iter().map(|s| s.k).collect(),
        intersection_fraction: inter as f64 / samples.max(1) as f64,
        intersection_wilson: wilson_interval(inter, samples, Z95),
        tails,
        limsup_fraction: lim as f64 / samples.max(1) as f64,
        limsup_wilson: wilson_interval(lim, samples, Z95),
        certified_fraction,
        certified_wilson,
    })
}

/// Ledger row of the cross-term bound along a recurrence schedule.
#[derive(Clone, Debug, Serialize)]
pub struct LedgerRow {
    pub k: usize,
    pub log2_v: f64,
    /// `log2` of the general bound at `|t| = v_k² δ/8` and `|t| = v_k²`.
    pub log2_bound_near: f64,
    pub log2_bound_far: f64,
    pub tightened: f64,
    /// The log-domain general bound cancels below one unit of `log2 v` here.
    pub precision_limited: bool,
}

/// General bound at the two ends of the stage time scale against the
/// tightened `ε` form, for every stage `K <= k < k_max`.
pub fn recurrence_ledger(
    schedule: &Schedule,
    consts: &EnvelopeConstants,
) -> Result<Vec<LedgerRow>> {
    let mut rows = Vec::new();
    for k in schedule.stages_used() {
        if k == schedule.k_max {
            break;
        }
        let lv = schedule.log2_v(k);
        // |t| in [v_k² δ/8, v_k²]; build t from logs to survive underflow
        let near = bound_at_log2_t(
            schedule,
            k,
            2.0 * lv + (schedule.delta / 8.0).log2(),
            consts,
        )?;
        let far = bound_at_log2_t(schedule, k, 2.0 * lv, consts)?;
        let tight = cross_term_bound(schedule, k, 1.0, consts)?
            .tightened
            .unwrap_or(f64::NAN);
        rows.push(LedgerRow {
            k,
            log2_v: lv,
            log2_bound_near: near,
            log2_bound_far: far,
            tightened: tight,
            precision_limited: lv.abs() * (beta(schedule.n) + 2.0) * f64::EPSILON > 0.25,
        });
    }
    Ok(rows)
}

fn bound_at_log2_t(
    schedule: &Schedule,
    k: usize,
    log2_t: f64,
    consts: &EnvelopeConstants,
) -> Result<f64> {
    let ts = schedule.tail_sums(k)?;
    let up = consts.h_fine.log2() + ts.log2_sum_hi - gamma(schedule.n) * log2_t;
    let lo = consts.h_coarse.log2() + log2_t + ts.log2_sum_lo;
    let m = up.max(lo);
    Ok(if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((up - m).exp2() + (lo - m).exp2()).log2()
    })
}

/// `index,x1..xn,t,value,passes` over the passing samples.
pub fn write_empirical_csv<W: Write>(set: &EmpiricalSet, mut w: W) -> Result<()> {
    let dim = set.passing.first().map(|p| p.x.len()).unwrap_or(2);
    let xs: Vec<String> = (1..=dim).map(|j| format!("x{j}")).collect();
    writeln!(w, "k,index,{},t,value", xs.join(","))?;
    for p in &set.passing {
        let xv: Vec<String> = p.x.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(
            w,
            "{},{},{},{:.16e},{:.16e}",
            set.k,
            p.index,
            xv.join(","),
            p.t,
            p.value
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::construction::ScheduleOverrides;

    #[test]
    fn window_example() {
        let st = Stage::from_log2_r(2, 0, 12.0).unwrap();
        let w = time_window(&st, 0.5, 1.0);
        assert!((w.t_center - 0.5 / 8192.0).abs() < 1e-20);
        assert!((w.tau_max - 4096f64.powf(-1.5) / 10.0).abs() < 1e-22);
        assert!(!w.empty);
        assert_eq!(time_window(&st, 0.0, 1.0).t_center, 0.0);
        let g = w.grid(64);
        assert_eq!(g.len(), 64);
        assert!(g.iter().all(|&t| w.contains(t)));
    }

    #[test]
    fn predictor_is_flat_on_the_window() {
        // 2 τ_max R^{3/2} = 0.2 sits inside the plateau
        assert_eq!(bump_eval(0.2), 1.0);
        assert_eq!(bump_eval(0.0), 1.0);
    }

    #[test]
    fn samples_are_deterministic_and_in_domain() {
        let a = sample_points(2, 0.5, 50, 7);
        let b = sample_points(2, 0.5, 50, 7);
        assert_eq!(a, b);
        assert!(a
            .iter()
            .all(|p| p.x1.abs() > 0.25 && p.x1 * p.x1 + p.xprime[0] * p.xprime[0] < 1.0));
        let c = sample_points(2, 0.5, 50, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn domain_measure_in_the_plane() {
        let a: f64 = 0.25;
        let strip = 2.0 * (a * (1.0 - a * a).sqrt() + a.asin());
        assert!((domain_measure(2, 0.5) - (std::f64::consts::PI - strip)).abs() < 1e-12);
    }

    #[test]
    fn thresholds_at_extremes() {
        let st = Stage::from_log2_r(2, 1, 8.0).unwrap();
        let pts = sample_points(2, 0.5, 6, 3);
        let cfg = SearchConfig {
            tau_grid: 16,
            refine: 4,
            ..Default::default()
        };
        let spec = QuadratureSpec::default();
        let all = search_ek(&st, &pts, 0.0, &cfg, &spec).unwrap();
        assert_eq!(all.fraction, 1.0);
        let majorant = crate::propagator::g_v_majorant(&st).unwrap().abs();
        let none = search_ek(&st, &pts, majorant * 1.0001, &cfg, &spec).unwrap();
        assert_eq!(none.fraction, 0.0);
    }

    #[test]
    fn limsup_of_nested_sets() {
        let mk = |k: usize, idx: &[usize]| EmpiricalSet {
            k,
            samples: 10,
            threshold: 1.0,
            passing: idx
                .iter()
                .map(|&i| SampleBest {
                    index: i,
                    x: vec![0.5, 0.0],
                    t: 0.0,
                    value: 1.0,
                    passes: true,
                })
                .collect(),
            fraction: idx.len() as f64 / 10.0,
            wilson: (0.0, 1.0),
            measure: 0.0,
        };
        let sets = [mk(1, &[0, 1, 2, 3]), mk(2, &[0, 1, 2]), mk(3, &[1])];
        let r = limsup_report(&sets, None).unwrap();
        assert_eq!(r.intersection_fraction, 0.1);
        assert_eq!(r.tails[0].fraction, 0.4);
        let one = limsup_report(&sets[..1], None).unwrap();
        assert_eq!(one.intersection_fraction, 0.4);
    }

    #[test]
    fn cross_bound_without_higher_stages() {
        let o = ScheduleOverrides {
            v_list: Some(vec![0.124, 0.005, 1.5e-6]),
            ..Default::default()
        };
        let s = crate::construction::build_schedule(2, 0.124, 0.5, 3, &o).unwrap();
        let c = EnvelopeConstants {
            f_sqrt: 1.0,
            f_linear: 1.0,
            g_decay: 1.0,
            g_uniform: 1.0,
            h_fine: 1.0,
            h_coarse: 1.0,
        };
        let t = 1e-12;
        let b = cross_term_bound(&s, 3, t, &c).unwrap();
        assert_eq!(b.upper, 0.0);
        let expect = t * (0.124f64.powf(-5.0) + 0.005f64.powf(-5.0));
        assert!((b.total / expect - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recurrence_ledger_decreases() {
        let s = crate::construction::build_schedule(2, 0.5, 0.5, 64, &ScheduleOverrides::default())
            .unwrap();
        let c = EnvelopeConstants {
            f_sqrt: 3.0,
            f_linear: 0.2,
            g_decay: 0.4,
            g_uniform: 3.0,
            h_fine: 0.6,
            h_coarse: 0.05,
        };
        let rows = recurrence_ledger(&s, &c).unwrap();
        assert!(rows.windows(2).all(|w| w[1].tightened < w[0].tightened));
        assert!(rows.iter().filter(|r| !r.precision_limited).count() >= 8);
        for r in rows.iter().filter(|r| !r.precision_limited) {
            assert!(r.log2_bound_near <= r.tightened.log2() + 1e-9, "{r:?}");
            assert!(r.log2_bound_far <= r.tightened.log2() + 1e-9, "{r:?}");
        }
    }
}
