//! Single-constant envelope checks for the pointwise estimates on `S_t f_v`,
//! `S_t G_v` and their product `S_t h_v`.
//!
//! Each inequality `|value| <= C · shape(v, t)` is sampled on a `(t, x)` grid;
//! `C` is the largest ratio at the coarsest stage times 1.05 and every finer
//! stage must stay below it.

use crate::construction::{beta, gamma, Stage};
use crate::error::{LabError, Result};
use crate::propagator::{propagate_f_v_auto, propagate_g_v_auto, EvalResult};
use crate::quad::QuadratureSpec;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SLACK: f64 = 1.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bound {
    /// `|S_t f_v| <= C v |t|^{-1/2}`
    FSqrt,
    /// `|S_t f_v| <= C |t| v^{-4}`
    FLinear,
    /// `|S_t G_v| <= C v^{(n-1)/2} (ln 1/v)^{n-1} |t|^{-(n-1)/2}`
    GDecay,
    /// `|S_t G_v| <= C v^{-(n-1)²/(2(n+1))}`
    GUniform,
    /// `|S_t h_v| <= C v |t|^{-γ}`
    HFine,
    /// `|S_t h_v| <= C |t| v^{-β}`
    HCoarse,
}

impl Bound {
    pub const ALL: [Bound; 6] = [
        Bound::FSqrt,
        Bound::FLinear,
        Bound::GDecay,
        Bound::GUniform,
        Bound::HFine,
        Bound::HCoarse,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Bound::FSqrt => "f_sqrt_decay",
            Bound::FLinear => "f_linear_growth",
            Bound::GDecay => "g_decay",
            Bound::GUniform => "g_uniform",
            Bound::HFine => "h_fine_tail",
            Bound::HCoarse => "h_coarse_growth",
        }
    }

    /// `log2` of the envelope shape.
    pub fn log2_shape(self, n: usize, log2_v: f64, t: f64) -> f64 {
        let m = n as f64 - 1.0;
        let nf = n as f64;
        let lt = t.abs().log2();
        match self {
            Bound::FSqrt => log2_v - 0.5 * lt,
            Bound::FLinear => lt - 4.0 * log2_v,
            Bound::GDecay => {
                let ln_inv_v = -log2_v * std::f64::consts::LN_2;
                m / 2.0 * log2_v + m * ln_inv_v.log2() - m / 2.0 * lt
            }
            Bound::GUniform => -m * m / (2.0 * (nf + 1.0)) * log2_v,
            Bound::HFine => log2_v - gamma(n) * lt,
            Bound::HCoarse => lt - beta(n) * log2_v,
        }
    }
}

/// Grid and stage set of the envelope suites.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConfig {
    pub n: usize,
    pub delta: f64,
    /// `log2 v` per stage, coarsest first.
    pub log2_v: Vec<f64>,
    pub t_min: f64,
    pub t_max: f64,
    /// Log-uniform `|t|` values per sign.
    pub t_count: usize,
    /// `|x1|` values per sign in `(δ/2, 1)`.
    pub x1_count: usize,
    /// Points `x'` along the diagonal of `[-1, 1]^{n-1}`.
    pub xprime_count: usize,
}

impl EnvelopeConfig {
    pub fn standard(n: usize, delta: f64) -> Self {
        Self {
            n,
            delta,
            log2_v: vec![-4.0, -5.0, -6.0, -7.0, -8.0],
            t_min: 1e-4,
            t_max: 1e-1,
            t_count: 12,
            x1_count: 6,
            xprime_count: 9,
        }
    }

    pub fn times(&self) -> Vec<f64> {
        let (a, b) = (self.t_min.ln(), self.t_max.ln());
        let m = self.t_count.max(2);
        let pos: Vec<f64> = (0..m)
            .map(|j| (a + (b - a) * j as f64 / (m - 1) as f64).exp())
            .collect();
        pos.iter()
            .map(|t| -t)
            .rev()
            .chain(pos.iter().copied())
            .collect()
    }

    pub fn x1_values(&self) -> Vec<f64> {
        let lo = self.delta / 2.0;
        let m = self.x1_count.max(1);
        let pos: Vec<f64> = (0..m)
            .map(|j| lo + (1.0 - lo) * (j as f64 + 0.5) / m as f64)
            .collect();
        pos.iter()
            .map(|x| -x)
            .rev()
            .chain(pos.iter().copied())
            .collect()
    }

    pub fn xprime_values(&self) -> Vec<Vec<f64>> {
        let m = self.xprime_count.max(1);
        let dims = self.n - 1;
        (0..m)
            .map(|j| {
                let c = if m == 1 {
                    0.0
                } else {
                    -1.0 + 2.0 * j as f64 / (m - 1) as f64
                };
                vec![c / (dims as f64).sqrt(); dims]
            })
            .collect()
    }

    /// Global grid plus the transport ridge `t = x1/(2R)` of the stage where
    /// it falls inside the range, so every stage samples its own peak.
    pub fn stage_times(&self, stage: &Stage) -> Vec<f64> {
        let mut ts = self.times();
        for x in self.x1_values() {
            let t = x / (2.0 * stage.r);
            if t.abs() >= self.t_min && t.abs() <= self.t_max {
                ts.push(t);
            }
        }
        ts.sort_by(|a, b| a.total_cmp(b));
        ts.dedup();
        ts
    }

    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(LabError::InvalidParameter(format!(
                "envelope suites need n >= 2, got {}",
                self.n
            )));
        }
        if self.log2_v.len() < 4 {
            return Err(LabError::InvalidParameter(format!(
                "envelope suites need at least 4 stages, got {}",
                self.log2_v.len()
            )));
        }
        let quarter = (self.delta / 4.0).log2();
        if let Some(lv) = self.log2_v.iter().find(|&&lv| lv >= quarter) {
            return Err(LabError::InvalidParameter(format!(
                "stage v = 2^{lv} is not below delta/4 = {}",
                self.delta / 4.0
            )));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(LabError::InvalidParameter(format!(
                "time range must satisfy 0 < t_min < t_max < 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }
}

/// Largest `|value| / shape` of one bound at one stage.
#[derive(Clone, Debug, Serialize)]
pub struct StageRatio {
    pub k: usize,
    pub v: f64,
    #[serde(rename = "R")]
    pub r: f64,
    pub ratio: f64,
    pub t: f64,
    pub x: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeResult {
    pub bound: Bound,
    pub id: String,
    pub stages: Vec<StageRatio>,
    pub calibrated: f64,
    pub worst_ratio: f64,
    pub holds: bool,
}

/// Constants of the six bounds, used by the cross-term ledger.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeConstants {
    pub f_sqrt: f64,
    pub f_linear: f64,
    pub g_decay: f64,
    pub g_uniform: f64,
    pub h_fine: f64,
    pub h_coarse: f64,
}

impl EnvelopeConstants {
    pub fn get(&self, b: Bound) -> f64 {
        match b {
            Bound::FSqrt => self.f_sqrt,
            Bound::FLinear => self.f_linear,
            Bound::GDecay => self.g_decay,
            Bound::GUniform => self.g_uniform,
            Bound::HFine => self.h_fine,
            Bound::HCoarse => self.h_coarse,
        }
    }
}

/// One sampled value, for the CSV dump.
#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeSample {
    pub k: usize,
    pub factor: &'static str,
    pub t: f64,
    pub x: f64,
    pub abs: f64,
    pub mode: &'static str,
}

#[derive(Clone, Debug, Serialize)]
pub struct EnvelopeSuite {
    pub config: EnvelopeConfig,
    pub results: Vec<EnvelopeResult>,
    pub constants: EnvelopeConstants,
    #[serde(skip)]
    pub samples: Vec<EnvelopeSample>,
}

impl EnvelopeSuite {
    pub fn all_hold(&self) -> bool {
        self.results.iter().all(|r| r.holds)
    }

    pub fn result(&self, b: Bound) -> &EnvelopeResult {
        self.results
            .iter()
            .find(|r| r.bound == b)
            .expect("all bounds are computed")
    }
}

struct StageValues {
    stage: Stage,
    ts: Vec<f64>,
    /// `|S_t f_v(x1)|` indexed `[t][x1]`.
    f: Vec<Vec<EvalResult>>,
    /// `|S_t G_v(x')|` indexed `[t][x']`.
    g: Vec<Vec<EvalResult>>,
}

fn stage_values(cfg: &EnvelopeConfig, k: usize, spec: &QuadratureSpec) -> Result<StageValues> {
    let stage = Stage::from_log2_v(cfg.n, k, cfg.log2_v[k - 1])?;
    let ts = cfg.stage_times(&stage);
    let x1s = cfg.x1_values();
    let xps = cfg.xprime_values();
    let mut f = Vec::with_capacity(ts.len());
    let mut g = Vec::with_capacity(ts.len());
    for &t in &ts {
        f.push(
            x1s.iter()
                .map(|&x| propagate_f_v_auto(&stage, t, x, spec))
                .collect::<Result<Vec<_>>>()?,
        );
        g.push(
            xps.iter()
                .map(|x| propagate_g_v_auto(&stage, t, x, spec))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    Ok(StageValues { stage, ts, f, g })
}

fn best(values: &[EvalResult]) -> (usize, f64) {
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (i, v.abs_upper()))
        .fold((0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
}

#[cfg(feature = "parallel")]
fn collect_stages(cfg: &EnvelopeConfig, spec: &QuadratureSpec) -> Result<Vec<StageValues>> {
    use rayon::prelude::*;
    (1..=cfg.log2_v.len())
        .into_par_iter()
        .map(|k| stage_values(cfg, k, spec))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn collect_stages(cfg: &EnvelopeConfig, spec: &QuadratureSpec) -> Result<Vec<StageValues>> {
    (1..=cfg.log2_v.len())
        .map(|k| stage_values(cfg, k, spec))
        .collect()
}

/// Runs the six envelope suites.
pub fn envelope_suite(cfg: &EnvelopeConfig, spec: &QuadratureSpec) -> Result<EnvelopeSuite> {
    cfg.validate()?;
    let n = cfg.n;
    let x1s = cfg.x1_values();
    let xps = cfg.xprime_values();
    let stages = collect_stages(cfg, spec)?;

    let mut results = Vec::with_capacity(6);
    for b in Bound::ALL {
        let mut per = Vec::with_capacity(stages.len());
        for sv in &stages {
            let st = &sv.stage;
            let mut top = StageRatio {
                k: st.k,
                v: st.v,
                r: st.r,
                ratio: 0.0,
                t: 0.0,
                x: vec![],
            };
            for (it, &t) in sv.ts.iter().enumerate() {
                let (jf, fmax) = best(&sv.f[it]);
                let (jg, gmax) = best(&sv.g[it]);
                let (val, x) = match b {
                    Bound::FSqrt | Bound::FLinear => (fmax, vec![x1s[jf]]),
                    Bound::GDecay | Bound::GUniform => (gmax, xps[jg].clone()),
                    Bound::HFine | Bound::HCoarse => {
                        let mut x = vec![x1s[jf]];
                        x.extend_from_slice(&xps[jg]);
                        (fmax * gmax, x)
                    }
                };
                let ratio = (val.log2() - b.log2_shape(n, st.log2_v, t)).exp2();
                if ratio > top.ratio {
                    top = StageRatio { ratio, t, x, ..top };
                }
            }
            per.push(top);
        }
        let calibrated = per[0].ratio * SLACK;
        let worst_ratio = per.iter().map(|s| s.ratio).fold(0.0, f64::max);
        results.push(EnvelopeResult {
            bound: b,
            id: b.id().to_string(),
            holds: per.iter().all(|s| s.ratio <= calibrated),
            stages: per,
            calibrated,
            worst_ratio,
        });
    }
    let c = |b: Bound| {
        results
            .iter()
            .find(|r| r.bound == b)
            .map(|r| r.calibrated)
            .unwrap_or(f64::NAN)
    };
    let constants = EnvelopeConstants {
        f_sqrt: c(Bound::FSqrt),
        f_linear: c(Bound::FLinear),
        g_decay: c(Bound::GDecay),
        g_uniform: c(Bound::GUniform),
        h_fine: c(Bound::HFine),
        h_coarse: c(Bound::HCoarse),
    };

    let mut samples = Vec::new();
    for sv in &stages {
        for (it, &t) in sv.ts.iter().enumerate() {
            for (j, e) in sv.f[it].iter().enumerate() {
                samples.push(EnvelopeSample {
                    k: sv.stage.k,
                    factor: "f",
                    t,
                    x: x1s[j],
                    abs: e.abs(),
                    mode: e.mode.as_str(),
                });
            }
            for (j, e) in sv.g[it].iter().enumerate() {
                samples.push(EnvelopeSample {
                    k: sv.stage.k,
                    factor: "G",
                    t,
                    x: xps[j][0],
                    abs: e.abs(),
                    mode: e.mode.as_str(),
                });
            }
        }
    }
    Ok(EnvelopeSuite {
        config: cfg.clone(),
        results,
        constants,
        samples,
    })
}

/// `bound,k,v,R,ratio,calibrated,t,holds`.
pub fn write_envelope_csv<W: Write>(suite: &EnvelopeSuite, mut w: W) -> Result<()> {
    writeln!(w, "bound,k,v,R,ratio,calibrated,t,holds")?;
    for r in &suite.results {
        for s in &r.stages {
            writeln!(
                w,
                "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.id,
                s.k,
                s.v,
                s.r,
                s.ratio,
                r.calibrated,
                s.t,
                s.ratio <= r.calibrated
            )?;
        }
    }
    Ok(())
}

/// `k,factor,t,x,abs,mode` for every grid value.
pub fn write_samples_csv<W: Write>(suite: &EnvelopeSuite, mut w: W) -> Result<()> {
    writeln!(w, "k,factor,t,x,abs,mode")?;
    for s in &suite.samples {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{:.16e},{}",
            s.k, s.factor, s.t, s.x, s.abs, s.mode
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_at_reference_point() {
        // v = 1/4, t = 1/16, n = 2
        let lv = -2.0;
        let t = 1.0 / 16.0;
        assert_eq!(Bound::FSqrt.log2_shape(2, lv, t), -2.0 + 2.0);
        assert_eq!(Bound::FLinear.log2_shape(2, lv, t), -4.0 + 8.0);
        assert_eq!(Bound::HCoarse.log2_shape(2, lv, t), -4.0 + 10.0);
        assert_eq!(Bound::HFine.log2_shape(2, lv, t), -2.0 + 4.0);
        assert!((Bound::GUniform.log2_shape(2, lv, t) - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn grids_respect_the_domain() {
        let cfg = EnvelopeConfig::standard(2, 0.5);
        assert!(cfg
            .x1_values()
            .iter()
            .all(|x| x.abs() > 0.25 && x.abs() < 1.0));
        let ts = cfg.times();
        assert_eq!(ts.len(), 24);
        assert!(ts
            .iter()
            .all(|t| t.abs() >= 1e-4 * (1.0 - 1e-12) && t.abs() <= 1e-1 * (1.0 + 1e-12)));
    }

    #[test]
    fn rejects_coarse_stage() {
        let mut cfg = EnvelopeConfig::standard(2, 0.5);
        cfg.log2_v[0] = -3.0;
        assert!(envelope_suite(&cfg, &QuadratureSpec::default()).is_err());
    }
}
