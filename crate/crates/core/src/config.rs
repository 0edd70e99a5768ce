//! Run configuration in a flat `key = value` format.
//!
//! Lists are comma separated, `#` starts a comment, optional values accept
//! `none`. Serialization is canonical (fixed key order, shortest round-trip
//! floats), so the content hash identifies a configuration.

use crate::construction::{build_schedule, Schedule, ScheduleOverrides};
use crate::divergence::SearchConfig;
use crate::envelope::EnvelopeConfig;
use crate::error::{LabError, Result};
use crate::quad::QuadratureSpec;
use crate::sobolev::HsConfig;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub n: usize,
    pub v1: f64,
    /// Explicit scales; replaces the recurrence when present.
    pub v_list: Option<Vec<f64>>,
    pub mu: Option<f64>,
    pub delta: f64,
    pub k_start: Option<usize>,
    pub k_max: usize,
    /// Exponents `j` of the dyadic scaling stages `v = 2^-j`.
    pub stages: Vec<u32>,
    /// Exponents of the envelope stages.
    pub envelope_stages: Vec<u32>,
    pub envelope_t_min: f64,
    pub envelope_t_max: f64,
    pub envelope_t_count: usize,
    pub envelope_x1_count: usize,
    pub envelope_xprime_count: usize,
    /// Sobolev exponent of the scaling fit.
    pub hs_s: f64,
    /// Exponents tested by the membership certificate.
    pub s_values: Vec<f64>,
    pub split_a: f64,
    pub decay_order: f64,
    pub quad_rel_tol: f64,
    pub quad_abs_tol: f64,
    pub tau_grid: usize,
    pub refine: usize,
    pub c_window: f64,
    pub samples: usize,
    pub seed: u64,
    pub c0_f: Option<f64>,
    pub c0_g: Option<f64>,
    pub c0_product: Option<f64>,
    /// Points per stage in the `|S_t h|` traces.
    pub trace_points: usize,
    pub ledger_stages: usize,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let env = EnvelopeConfig::standard(2, 0.5);
        Self {
            n: 2,
            v1: 0.124,
            v_list: Some(vec![0.124, 0.005, 1.5e-6]),
            mu: None,
            delta: 0.5,
            k_start: None,
            k_max: 3,
            stages: (3..=8).collect(),
            envelope_stages: (4..=8).collect(),
            envelope_t_min: env.t_min,
            envelope_t_max: env.t_max,
            envelope_t_count: env.t_count,
            envelope_x1_count: env.x1_count,
            envelope_xprime_count: env.xprime_count,
            hs_s: 0.25,
            s_values: vec![0.0, 0.2, 0.3, 1.0 / 3.0],
            split_a: 4.0,
            decay_order: 8.0,
            quad_rel_tol: 1e-10,
            quad_abs_tol: 1e-13,
            tau_grid: 64,
            refine: 12,
            c_window: 1.0,
            samples: 200,
            seed: 7,
            c0_f: None,
            c0_g: None,
            c0_product: None,
            trace_points: 240,
            ledger_stages: 64,
            out_dir: "out".into(),
        }
    }
}

fn fmt_list<T: std::fmt::Debug>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| format!("{x:?}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fmt_opt<T: std::fmt::Debug>(x: &Option<T>) -> String {
    x.as_ref()
        .map(|v| format!("{v:?}"))
        .unwrap_or_else(|| "none".into())
}

fn parse_scalar<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| LabError::Config(format!("cannot parse `{v}` for key `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse_scalar(key, s)).collect()
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v.trim().eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        parse_scalar(key, v).map(Some)
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LabError::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            c.set(key.trim(), value.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n" => self.n = parse_scalar(key, v)?,
            "v1" => self.v1 = parse_scalar(key, v)?,
            "v_list" => {
                self.v_list = if v.eq_ignore_ascii_case("none") {
                    None
                } else {
                    Some(parse_list(key, v)?)
                }
            }
            "mu" => self.mu = parse_opt(key, v)?,
            "delta" => self.delta = parse_scalar(key, v)?,
            "k_start" => self.k_start = parse_opt(key, v)?,
            "k_max" => self.k_max = parse_scalar(key, v)?,
            "stages" => self.stages = parse_list(key, v)?,
            "envelope_stages" => self.envelope_stages = parse_list(key, v)?,
            "envelope_t_min" => self.envelope_t_min = parse_scalar(key, v)?,
            "envelope_t_max" => self.envelope_t_max = parse_scalar(key, v)?,
            "envelope_t_count" => self.envelope_t_count = parse_scalar(key, v)?,
            "envelope_x1_count" => self.envelope_x1_count = parse_scalar(key, v)?,
            "envelope_xprime_count" => self.envelope_xprime_count = parse_scalar(key, v)?,
            "hs_s" => self.hs_s = parse_scalar(key, v)?,
            "s_values" => self.s_values = parse_list(key, v)?,
            "split_a" => self.split_a = parse_scalar(key, v)?,
            "decay_order" => self.decay_order = parse_scalar(key, v)?,
            "quad_rel_tol" => self.quad_rel_tol = parse_scalar(key, v)?,
            "quad_abs_tol" => self.quad_abs_tol = parse_scalar(key, v)?,
            "tau_grid" => self.tau_grid = parse_scalar(key, v)?,
            "refine" => self.refine = parse_scalar(key, v)?,
            "c_window" => self.c_window = parse_scalar(key, v)?,
            "samples" => self.samples = parse_scalar(key, v)?,
            "seed" => self.seed = parse_scalar(key, v)?,
            "c0_f" => self.c0_f = parse_opt(key, v)?,
            "c0_g" => self.c0_g = parse_opt(key, v)?,
            "c0_product" => self.c0_product = parse_opt(key, v)?,
            "trace_points" => self.trace_points = parse_scalar(key, v)?,
            "ledger_stages" => self.ledger_stages = parse_scalar(key, v)?,
            "out_dir" => self.out_dir = v.to_string(),
            _ => return Err(LabError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(serialize())` is the identity.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n", self.n.to_string());
        kv("v1", format!("{:?}", self.v1));
        kv(
            "v_list",
            self.v_list
                .as_ref()
                .map(|l| fmt_list(l))
                .unwrap_or_else(|| "none".into()),
        );
        kv("mu", fmt_opt(&self.mu));
        kv("delta", format!("{:?}", self.delta));
        kv("k_start", fmt_opt(&self.k_start));
        kv("k_max", self.k_max.to_string());
        kv("stages", fmt_list(&self.stages));
        kv("envelope_stages", fmt_list(&self.envelope_stages));
        kv("envelope_t_min", format!("{:?}", self.envelope_t_min));
        kv("envelope_t_max", format!("{:?}", self.envelope_t_max));
        kv("envelope_t_count", self.envelope_t_count.to_string());
        kv("envelope_x1_count", self.envelope_x1_count.to_string());
        kv(
            "envelope_xprime_count",
            self.envelope_xprime_count.to_string(),
        );
        kv("hs_s", format!("{:?}", self.hs_s));
        kv("s_values", fmt_list(&self.s_values));
        kv("split_a", format!("{:?}", self.split_a));
        kv("decay_order", format!("{:?}", self.decay_order));
        kv("quad_rel_tol", format!("{:?}", self.quad_rel_tol));
        kv("quad_abs_tol", format!("{:?}", self.quad_abs_tol));
        kv("tau_grid", self.tau_grid.to_string());
        kv("refine", self.refine.to_string());
        kv("c_window", format!("{:?}", self.c_window));
        kv("samples", self.samples.to_string());
        kv("seed", self.seed.to_string());
        kv("c0_f", fmt_opt(&self.c0_f));
        kv("c0_g", fmt_opt(&self.c0_g));
        kv("c0_product", fmt_opt(&self.c0_product));
        kv("trace_points", self.trace_points.to_string());
        kv("ledger_stages", self.ledger_stages.to_string());
        kv("out_dir", self.out_dir.clone());
        s
    }

    /// SHA-256 of the canonical form without `out_dir`, hex encoded.
    pub fn hash(&self) -> String {
        let c = Self {
            out_dir: String::new(),
            ..self.clone()
        };
        hex::encode(Sha256::digest(c.serialize().as_bytes()))
    }

    /// Checks shared by every command.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(LabError::Config(format!(
                "n = {} is not supported: the construction requires dimension n >= 2 (and s < n/(2(n+1)))",
                self.n
            )));
        }
        if !(self.delta > 0.0 && self.delta < 2.0) {
            return Err(LabError::Config(format!(
                "delta must lie in (0, 2), got {}",
                self.delta
            )));
        }
        if !(self.quad_rel_tol > 0.0 && self.quad_abs_tol > 0.0) {
            return Err(LabError::Config(
                "quadrature tolerances must be positive".into(),
            ));
        }
        if self.tau_grid < 64 {
            return Err(LabError::Config(format!(
                "tau_grid must be at least 64, got {}",
                self.tau_grid
            )));
        }
        if self.samples == 0 {
            return Err(LabError::Config("samples must be positive".into()));
        }
        if !(self.c_window > 0.0) {
            return Err(LabError::Config("c_window must be positive".into()));
        }
        if self
            .s_values
            .iter()
            .chain([&self.hs_s])
            .any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(LabError::Config(
                "Sobolev exponents must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Fit and envelope precondition: at least four stages.
    pub fn validate_stage_lists(&self) -> Result<()> {
        for (name, list) in [
            ("stages", &self.stages),
            ("envelope_stages", &self.envelope_stages),
        ] {
            if list.len() < 4 {
                return Err(LabError::Config(format!(
                    "{name} lists {} stages; log-log fits need at least 4",
                    list.len()
                )));
            }
            if list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(LabError::Config(format!(
                    "{name} must be strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn quadrature(&self) -> QuadratureSpec {
        QuadratureSpec::new(self.quad_rel_tol, self.quad_abs_tol)
    }

    pub fn hs_config(&self) -> HsConfig {
        HsConfig {
            split_a: self.split_a,
            decay_order: self.decay_order,
            ..HsConfig::default()
        }
    }

    pub fn envelope_config(&self) -> EnvelopeConfig {
        EnvelopeConfig {
            n: self.n,
            delta: self.delta,
            log2_v: self.envelope_stages.iter().map(|&j| -(j as f64)).collect(),
            t_min: self.envelope_t_min,
            t_max: self.envelope_t_max,
            t_count: self.envelope_t_count,
            x1_count: self.envelope_x1_count,
            xprime_count: self.envelope_xprime_count,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            samples: self.samples,
            seed: self.seed,
            tau_grid: self.tau_grid,
            refine: self.refine,
            c_window: self.c_window,
            delta: self.delta,
            c0_f: self.c0_f,
            c0_g: self.c0_g,
            c0_product: self.c0_product,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let o = ScheduleOverrides {
            mu: self.mu,
            eps: None,
            v_list: self.v_list.clone(),
            k_start: self.k_start,
        };
        let v1 = self
            .v_list
            .as_ref()
            .and_then(|l| l.first().copied())
            .unwrap_or(self.v1);
        build_schedule(self.n, v1, self.delta, self.k_max, &o)
            .map_err(|e| LabError::Config(format!("schedule: {e}")))
    }

    /// The unmodified recurrence used by the cross-term ledger.
    pub fn ledger_schedule(&self) -> Result<Schedule> {
        build_schedule(
            self.n,
            0.5,
            self.delta,
            self.ledger_stages,
            &ScheduleOverrides::default(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        let text = c.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.serialize(), text);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn comments_and_lists() {
        let c =
            RunConfig::parse("# demo\nn = 3  # dim\nv_list = 0.1, 0.01\nc0_g = none\nseed=11\n")
                .unwrap();
        assert_eq!(c.n, 3);
        assert_eq!(c.v_list, Some(vec![0.1, 0.01]));
        assert_eq!(c.seed, 11);
        assert!(RunConfig::parse("bogus = 1").is_err());
        assert!(RunConfig::parse("n 2").is_err());
        assert!(RunConfig::parse("n = two").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn dimension_one_is_rejected() {
        let c = RunConfig {
            n: 1,
            ..Default::default()
        };
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("n >= 2"), "{e}");
    }

    #[test]
    fn short_stage_list_is_rejected() {
        let c = RunConfig {
            stages: vec![3, 4, 5],
            ..Default::default()
        };
        assert!(c.validate_stage_lists().is_err());
        assert!(RunConfig::default().validate_stage_lists().is_ok());
    }

    #[test]
    fn default_schedule_builds() {
        let s = RunConfig::default().schedule().unwrap();
        assert_eq!(s.k_max, 3);
        assert_eq!(s.watermark(), "explicit-v-override");
    }
}
