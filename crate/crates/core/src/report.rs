//! Experiment commands, artifact manifests, and the collated report.
//!
//! Every command writes its artifacts plus `<command>.manifest.json`, which
//! carries the resolved config, its hash, and a SHA-256 per artifact. The
//! report command reads the manifests back and refuses to mix hashes.

use crate::config::RunConfig;
use crate::construction::{write_stages_csv, Point, Stage};
use crate::divergence::{
    calibrate_thresholds, certify_points, limsup_report, lower_bound_f, recurrence_ledger,
    sample_points, schedule_stages, search_ek, time_window, write_empirical_csv, EmpiricalSet,
};
use crate::envelope::{envelope_suite, write_envelope_csv, write_samples_csv, EnvelopeSuite};
use crate::error::{LabError, Result};
use crate::propagator::propagate_h_stages;
use crate::sobolev::{fits_json, hs_membership, scaling_suite, write_scaling_csv, ScalingSuite};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Result of one command: `ok == false` maps to exit status 1.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub ok: bool,
    pub lines: Vec<String>,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ArtifactEntry {
    pub name: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    #[serde(rename = "configHash")]
    pub config_hash: String,
    pub config: String,
    pub ok: bool,
    pub artifacts: Vec<ArtifactEntry>,
}

struct Writer {
    dir: PathBuf,
    hash: String,
    written: Vec<ArtifactEntry>,
}

impl Writer {
    fn new(dir: &Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hash: cfg.hash(),
            written: Vec::new(),
        })
    }

    fn bytes(&mut self, name: &str, data: &[u8]) -> Result<()> {
        fs::write(self.dir.join(name), data)?;
        self.written.push(ArtifactEntry {
            name: name.to_string(),
            sha256: hex::encode(Sha256::digest(data)),
        });
        Ok(())
    }

    fn csv<F: FnOnce(&mut Vec<u8>) -> Result<()>>(&mut self, name: &str, f: F) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.bytes(name, &buf)
    }

    /// JSON object with `configHash` prepended.
    fn json(&mut self, name: &str, mut v: Value) -> Result<()> {
        if let Value::Object(m) = &mut v {
            m.insert("configHash".into(), Value::String(self.hash.clone()));
        }
        let mut s = serde_json::to_string_pretty(&v).map_err(|e| LabError::Io(e.to_string()))?;
        s.push('\n');
        self.bytes(name, s.as_bytes())
    }

    fn finish(
        self,
        command: &str,
        cfg: &RunConfig,
        ok: bool,
        lines: Vec<String>,
    ) -> Result<Outcome> {
        let m = Manifest {
            command: command.to_string(),
            config_hash: self.hash.clone(),
            config: cfg.serialize(),
            ok,
            artifacts: self.written.clone(),
        };
        let mut s = serde_json::to_string_pretty(&m).map_err(|e| LabError::Io(e.to_string()))?;
        s.push('\n');
        fs::write(self.dir.join(format!("{command}.manifest.json")), s)?;
        let artifacts = self.written.into_iter().map(|a| a.name).collect();
        Ok(Outcome {
            ok,
            lines,
            artifacts,
        })
    }
}

fn to_value<T: Serialize>(x: &T) -> Result<Value> {
    serde_json::to_value(x).map_err(|e| LabError::Io(e.to_string()))
}

fn dyadic_stages(cfg: &RunConfig, exps: &[u32]) -> Result<Vec<Stage>> {
    exps.iter()
        .enumerate()
        .map(|(i, &j)| Stage::from_log2_v(cfg.n, i + 1, -(j as f64)))
        .collect()
}

fn scaling_for(cfg: &RunConfig) -> Result<ScalingSuite> {
    let stages = dyadic_stages(cfg, &cfg.stages)?;
    scaling_suite(&stages, cfg.hs_s, &cfg.hs_config(), &cfg.quadrature())
}

fn envelopes_for(cfg: &RunConfig) -> Result<EnvelopeSuite> {
    envelope_suite(&cfg.envelope_config(), &cfg.quadrature())
}

/// Envelope suites of the six pointwise bounds, the norm suites and the
/// Dirichlet masses. Status follows the calibrated pointwise envelopes and the
/// Dirichlet `log R` envelope.
pub fn cmd_verify_bounds(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    cfg.validate_stage_lists()?;
    let env = envelopes_for(cfg)?;
    let suite = scaling_for(cfg)?;
    let mut w = Writer::new(out, cfg)?;
    w.csv("envelopes.csv", |b| write_envelope_csv(&env, b))?;
    w.csv("envelope_samples.csv", |b| write_samples_csv(&env, b))?;
    w.csv("norms.csv", |b| write_scaling_csv(&suite.rows, b))?;
    w.csv("dirichlet.csv", |b| {
        use std::io::Write;
        writeln!(b, "k,R,p,offset,mass,period_mass")?;
        for d in &suite.dirichlet {
            for (a, m) in d.offsets.iter().zip(&d.masses) {
                writeln!(
                    b,
                    "{},{:.16e},{},{:.16e},{:.16e},{:.16e}",
                    d.report.k, d.report.r, d.p, a, m, d.period_mass
                )?;
            }
        }
        Ok(())
    })?;
    let dirichlet = suite
        .envelopes
        .iter()
        .find(|e| e.quantity == "L1_Dirichlet")
        .cloned();
    let dirichlet_ok = dirichlet.as_ref().map(|d| d.holds).unwrap_or(false);
    let ok = env.all_hold() && dirichlet_ok;
    let mut lines = Vec::new();
    for r in &env.results {
        lines.push(format!(
            "{:<16} calibrated {:.4e} worst {:.4e} {}",
            r.id,
            r.calibrated,
            r.worst_ratio,
            if r.holds { "holds" } else { "VIOLATED" }
        ));
    }
    for e in &suite.envelopes {
        let tag = if e.quantity == "L1_Dirichlet" {
            ""
        } else {
            " (informational)"
        };
        lines.push(format!(
            "{:<16} calibrated {:.4e} worst {:.4e} {}{}",
            e.quantity,
            e.calibrated,
            e.worst,
            if e.holds { "holds" } else { "exceeds" },
            tag
        ));
    }
    w.json(
        "bounds_summary.json",
        json!({
            "pointwise": to_value(&env.results)?,
            "constants": to_value(&env.constants)?,
            "norms": to_value(&suite.envelopes)?,
            "hs": to_value(&suite.hs)?,
            "ok": ok,
        }),
    )?;
    w.finish("verify-bounds", cfg, ok, lines)
}

/// Log-log fits, the plot table and the membership certificates.
pub fn cmd_scaling(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    cfg.validate_stage_lists()?;
    let spec = cfg.quadrature();
    let suite = scaling_for(cfg)?;
    let membership_schedule = crate::construction::build_schedule(
        cfg.n,
        0.5,
        cfg.delta,
        12,
        &crate::construction::ScheduleOverrides::default(),
    )?;
    let membership = cfg
        .s_values
        .iter()
        .map(|&s| hs_membership(&membership_schedule, s, &cfg.hs_config(), &spec))
        .collect::<Result<Vec<_>>>()?;
    let mut w = Writer::new(out, cfg)?;
    w.csv("scaling.csv", |b| write_scaling_csv(&suite.rows, b))?;
    w.json("fits.json", json!({ "fits": fits_json(&suite.fits) }))?;
    w.csv("scaling_plot.csv", |b| {
        use std::io::Write;
        writeln!(b, "quantity,x,y")?;
        for f in &suite.fits {
            for r in suite.rows.iter().filter(|r| r.quantity == f.quantity) {
                let x = if f.abscissa == "R" { r.r } else { r.v };
                writeln!(b, "{},{:.16e},{:.16e}", f.quantity, x, r.measured)?;
            }
        }
        Ok(())
    })?;
    w.json(
        "membership.json",
        json!({ "certificates": to_value(&membership)? }),
    )?;

    let i2_ok = suite.hs.iter().all(|h| h.i2 <= h.i2_envelope);
    let f_slope = suite
        .fits
        .iter()
        .find(|f| f.quantity == "L2_fv")
        .map(|f| f.slope)
        .unwrap_or(f64::NAN);
    let closed_ok = (f_slope - 0.5).abs() <= 1e-6;
    let mut lines: Vec<String> = suite
        .fits
        .iter()
        .map(|f| {
            format!(
                "{:<10} slope {:+.4} expected {:+.4} residual {:.2e}",
                f.quantity, f.slope, f.expected_slope, f.residual
            )
        })
        .collect();
    for m in &membership {
        lines.push(format!(
            "membership s = {:.4}: {}",
            m.s,
            if m.holds { "holds" } else { "fails" }
        ));
    }
    if !i2_ok {
        lines.push("high-frequency remainder exceeds its envelope".into());
    }
    if !closed_ok {
        lines.push(format!(
            "L2_fv slope {f_slope} departs from the closed form 0.5"
        ));
    }
    let ok = i2_ok && closed_ok;
    w.finish("scaling", cfg, ok, lines)
}

struct SearchRun {
    stages: Vec<Stage>,
    points: Vec<Point>,
    thresholds: crate::divergence::Thresholds,
    sets: Vec<EmpiricalSet>,
}

fn run_search(cfg: &RunConfig) -> Result<(crate::construction::Schedule, SearchRun)> {
    let schedule = cfg.schedule()?;
    let stages = schedule_stages(&schedule)?;
    let scfg = cfg.search_config();
    let spec = cfg.quadrature();
    let points = sample_points(cfg.n, cfg.delta, cfg.samples, cfg.seed);
    let thresholds = calibrate_thresholds(&stages[0], &points, &scfg, &spec)?;
    let sets = stages
        .iter()
        .map(|st| search_ek(st, &points, thresholds.c0_g, &scfg, &spec))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        schedule,
        SearchRun {
            stages,
            points,
            thresholds,
            sets,
        },
    ))
}

fn write_search(
    w: &mut Writer,
    cfg: &RunConfig,
    schedule: &crate::construction::Schedule,
    run: &SearchRun,
) -> Result<Vec<String>> {
    w.csv("stages.csv", |b| write_stages_csv(b, &run.stages))?;
    for set in &run.sets {
        w.csv(&format!("empirical_k{}.csv", set.k), |b| {
            write_empirical_csv(set, b)
        })?;
    }
    let spec = cfg.quadrature();
    let scfg = cfg.search_config();
    // lower-bound windows at the first 20 samples
    let probe: Vec<&Point> = run.points.iter().take(20).collect();
    let mut windows = Vec::new();
    for st in &run.stages {
        for p in &probe {
            let lb = lower_bound_f(st, p.x1, &scfg, &spec)?;
            windows.push(json!({
                "k": st.k,
                "x1": p.x1,
                "tBest": lb.t_best,
                "value": lb.value,
                "ratioMin": lb.ratio_min,
                "ratioMax": lb.ratio_max,
            }));
        }
    }
    let sets: Vec<Value> = run
        .sets
        .iter()
        .map(|s| {
            json!({
                "k": s.k,
                "samples": s.samples,
                "passing": s.passing.len(),
                "fraction": s.fraction,
                "wilson": [s.wilson.0, s.wilson.1],
                "measure": s.measure,
            })
        })
        .collect();
    w.json(
        "search.json",
        json!({
            "watermark": schedule.watermark(),
            "thresholds": to_value(&run.thresholds)?,
            "sets": sets,
            "windows": windows,
        }),
    )?;
    Ok(run
        .sets
        .iter()
        .map(|s| {
            format!(
                "stage {}: {}/{} pass (fraction {:.4}, 95% [{:.4}, {:.4}], measure {:.4})",
                s.k,
                s.passing.len(),
                s.samples,
                s.fraction,
                s.wilson.0,
                s.wilson.1,
                s.measure
            )
        })
        .collect())
}

pub fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let (schedule, run) = run_search(cfg)?;
    let mut w = Writer::new(out, cfg)?;
    let mut lines = write_search(&mut w, cfg, &schedule, &run)?;
    let lim = limsup_report(&run.sets, None)?;
    lines.push(format!(
        "all stages: fraction {:.4}, 95% [{:.4}, {:.4}]",
        lim.intersection_fraction, lim.intersection_wilson.0, lim.intersection_wilson.1
    ));
    w.json("limsup.json", to_value(&lim)?)?;
    w.finish("search", cfg, true, lines)
}

/// `(k, t, |S_t h|, est_error, exact)`.
type TraceRow = (usize, f64, f64, f64, bool);

/// `|S_t h(x)|` on `points` times spread over `t_k ± 2 R_k^{-3/2}` per stage.
fn traces(cfg: &RunConfig, stages: &[Stage], p: &Point) -> Result<Vec<TraceRow>> {
    let spec = cfg.quadrature();
    let m = cfg.trace_points.max(8);
    let mut rows = Vec::new();
    for st in stages {
        let w = time_window(st, p.x1, cfg.c_window);
        let half = 20.0 * w.tau_max;
        for j in 0..m {
            let t = w.t_center + half * (2.0 * j as f64 / (m - 1) as f64 - 1.0);
            if t == 0.0 {
                continue;
            }
            let h = propagate_h_stages(stages, t, p, &spec)?;
            rows.push((
                st.k,
                t,
                h.total.abs(),
                h.total.est_error,
                h.total.is_exact(),
            ));
        }
    }
    Ok(rows)
}

/// Search, per-point certificates, the cross-term ledger and `|S_t h|` traces.
pub fn cmd_certify(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let (schedule, run) = run_search(cfg)?;
    let env = envelopes_for(cfg)?;
    let spec = cfg.quadrature();
    let scfg = cfg.search_config();
    let hash = crate::divergence::schedule_hash(&schedule);
    let certs = certify_points(
        &schedule,
        &run.stages,
        &run.points,
        &run.thresholds,
        &env.constants,
        &scfg,
        &hash,
        &spec,
    )?;
    let ledger_schedule = cfg.ledger_schedule()?;
    let ledger = recurrence_ledger(&ledger_schedule, &env.constants)?;

    let mut w = Writer::new(out, cfg)?;
    let mut lines = write_search(&mut w, cfg, &schedule, &run)?;
    let lim = limsup_report(&run.sets, Some(&certs))?;
    w.json("limsup.json", to_value(&lim)?)?;
    w.json(
        "certificates.json",
        json!({
            "watermark": schedule.watermark(),
            "thresholds": to_value(&run.thresholds)?,
            "constants": to_value(&env.constants)?,
            "certificates": to_value(&certs)?,
        }),
    )?;
    w.csv("ledger.csv", |b| {
        use std::io::Write;
        writeln!(
            b,
            "k,log2_v,log2_bound_near,log2_bound_far,tightened,precision_limited"
        )?;
        for r in &ledger {
            writeln!(
                b,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                r.k,
                r.log2_v,
                r.log2_bound_near,
                r.log2_bound_far,
                r.tightened,
                r.precision_limited
            )?;
        }
        Ok(())
    })?;
    let trace_point = certs
        .iter()
        .position(|c| c.valid)
        .map(|i| run.points[i].clone())
        .unwrap_or_else(|| run.points[0].clone());
    let rows = traces(cfg, &run.stages, &trace_point)?;
    w.csv("traces.csv", |b| {
        use std::io::Write;
        writeln!(b, "k,t,abs_h,est_error,exact,x1,x2")?;
        for (k, t, a, e, exact) in &rows {
            writeln!(
                b,
                "{},{:.16e},{:.16e},{:.16e},{},{:.16e},{:.16e}",
                k,
                t,
                a,
                e,
                exact,
                trace_point.x1,
                trace_point.xprime.first().copied().unwrap_or(0.0)
            )?;
        }
        Ok(())
    })?;

    let valid = certs.iter().filter(|c| c.valid).count();
    let bounds_ok = certs.iter().all(|c| c.stages.iter().all(|s| s.bound_holds));
    let ledger_ok = ledger.windows(2).all(|p| p[1].tightened < p[0].tightened)
        && ledger.iter().filter(|r| !r.precision_limited).all(|r| {
            r.log2_bound_near <= r.tightened.log2() + 1e-9
                && r.log2_bound_far <= r.tightened.log2() + 1e-9
        });
    lines.push(format!(
        "certified {valid}/{} (95% [{:.4}, {:.4}])",
        certs.len(),
        lim.certified_wilson.map(|w| w.0).unwrap_or(0.0),
        lim.certified_wilson.map(|w| w.1).unwrap_or(0.0)
    ));
    lines.push(format!(
        "cross terms within the analytic bound: {bounds_ok}"
    ));
    lines.push(format!(
        "ledger over {} stages decreasing and dominated: {ledger_ok}",
        ledger.len()
    ));
    w.finish("certify", cfg, bounds_ok && ledger_ok, lines)
}

const REQUIRED: [&str; 3] = ["verify-bounds", "scaling", "certify"];

fn read_json(path: &Path) -> Result<Value> {
    let s = fs::read_to_string(path)?;
    serde_json::from_str(&s).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}

/// Loads every manifest and checks artifacts and hashes.
pub fn load_manifests(out: &Path) -> Result<Vec<Manifest>> {
    let mut missing = Vec::new();
    let mut manifests = Vec::new();
    for c in REQUIRED {
        let p = out.join(format!("{c}.manifest.json"));
        if !p.exists() {
            missing.push(format!("{c}.manifest.json (run `{c}`)"));
            continue;
        }
        let m: Manifest = serde_json::from_value(read_json(&p)?)
            .map_err(|e| LabError::Config(format!("{}: {e}", p.display())))?;
        for a in &m.artifacts {
            match fs::read(out.join(&a.name)) {
                Ok(bytes) if hex::encode(Sha256::digest(&bytes)) == a.sha256 => {}
                Ok(_) => {
                    return Err(LabError::Config(format!(
                        "artifact {} was modified after `{}` wrote it",
                        a.name, m.command
                    )))
                }
                Err(_) => missing.push(a.name.clone()),
            }
        }
        manifests.push(m);
    }
    if !missing.is_empty() {
        return Err(LabError::Config(format!(
            "missing artifacts in {}: {}",
            out.display(),
            missing.join(", ")
        )));
    }
    let h = &manifests[0].config_hash;
    if let Some(m) = manifests.iter().find(|m| &m.config_hash != h) {
        return Err(LabError::Config(format!(
            "artifacts come from different configs: `{}` has {} but `{}` has {}",
            manifests[0].command, h, m.command, m.config_hash
        )));
    }
    Ok(manifests)
}

/// Line plot of `(t, |S_t h|)` with a marker at `t_mark`.
pub fn trace_svg(title: &str, pts: &[(f64, f64)], t_mark: f64) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 360.0, 80.0, 20.0, 30.0, 50.0);
    let (x0, x1) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| {
        (a.0.min(p.0), a.1.max(p.0))
    });
    let y1 = pts
        .iter()
        .map(|p| p.1)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0).max(f64::MIN_POSITIVE) * (w - ml - mr);
    let sy = |y: f64| h - mb - y / y1 * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="18" text-anchor="middle">{}</text>"#,
        w / 2.0,
        title
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - mb,
        w - mr,
        h - mb
    );
    let _ = writeln!(
        s,
        r#"<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{}" stroke="black"/>"#,
        h - mb
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y1 * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{:.3e}</text>"#,
            sx(fx),
            h - mb + 16.0,
            fx
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            ml - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">t</text>"#,
        w / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">|S_t h(x)|</text>"#,
        h / 2.0,
        h / 2.0
    );
    if t_mark >= x0 && t_mark <= x1 {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.1}" y1="{mt}" x2="{0:.1}" y2="{1}" stroke="red" stroke-dasharray="4 3"/>"#,
            sx(t_mark),
            h - mb
        );
    }
    let poly: Vec<String> = pts
        .iter()
        .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline fill="none" stroke="steelblue" stroke-width="1.5" points="{}"/>"#,
        poly.join(" ")
    );
    s.push_str("</svg>\n");
    s
}

fn fmt(x: &Value) -> String {
    x.as_f64()
        .map(|v| format!("{v:.4e}"))
        .unwrap_or_else(|| x.to_string())
}

/// Collates the artifacts of `verify-bounds`, `scaling` and `certify` into
/// `report.md` and one SVG per stage.
pub fn cmd_report(out: &Path) -> Result<Outcome> {
    let manifests = load_manifests(out)?;
    let hash = manifests[0].config_hash.clone();
    let bounds = read_json(&out.join("bounds_summary.json"))?;
    let fits = read_json(&out.join("fits.json"))?;
    let membership = read_json(&out.join("membership.json"))?;
    let certs = read_json(&out.join("certificates.json"))?;
    let lim = read_json(&out.join("limsup.json"))?;
    let traces = fs::read_to_string(out.join("traces.csv"))?;

    let mut md = String::new();
    let _ = writeln!(md, "# Localization lab report\n\nconfig hash `{hash}`\n");
    let _ = writeln!(
        md,
        "| claim | expected | measured | status |\n|---|---|---|---|"
    );
    for r in bounds["pointwise"].as_array().into_iter().flatten() {
        let _ = writeln!(
            md,
            "| envelope {} | single constant | calibrated {} worst {} | {} |",
            r["id"].as_str().unwrap_or("?"),
            fmt(&r["calibrated"]),
            fmt(&r["worst_ratio"]),
            if r["holds"].as_bool() == Some(true) {
                "holds"
            } else {
                "violated"
            }
        );
    }
    for r in bounds["norms"].as_array().into_iter().flatten() {
        let _ = writeln!(
            md,
            "| envelope {} | single constant | calibrated {} worst {} | {} |",
            r["quantity"].as_str().unwrap_or("?"),
            fmt(&r["calibrated"]),
            fmt(&r["worst"]),
            if r["holds"].as_bool() == Some(true) {
                "holds"
            } else {
                "exceeds"
            }
        );
    }
    for f in fits["fits"].as_array().into_iter().flatten() {
        let _ = writeln!(
            md,
            "| slope {} vs {} | {} | {} (residual {}) | |",
            f["quantity"].as_str().unwrap_or("?"),
            f["abscissa"].as_str().unwrap_or("?"),
            fmt(&f["expected_slope"]),
            fmt(&f["slope"]),
            fmt(&f["residual"])
        );
    }
    for m in membership["certificates"].as_array().into_iter().flatten() {
        let _ = writeln!(
            md,
            "| H_s membership s = {} | holds iff s < n/(2(n+1)) | exponent {} | {} |",
            fmt(&m["s"]),
            fmt(&m["exponent"]),
            if m["holds"].as_bool() == Some(true) {
                "holds"
            } else {
                "fails"
            }
        );
    }
    let list = certs["certificates"]
        .as_array()
        .cloned()
        .unwrap_or_default();
    let valid = list
        .iter()
        .filter(|c| c["valid"].as_bool() == Some(true))
        .count();
    let _ = writeln!(
        md,
        "| certified fraction | > 0 | {}/{} (95% {}) | {} |",
        valid,
        list.len(),
        lim["certified_wilson"],
        if valid > 0 { "holds" } else { "fails" }
    );
    let _ = writeln!(
        md,
        "| all-stage fraction of the G search | > 0 | {} (95% {}) | |",
        fmt(&lim["intersection_fraction"]),
        lim["intersection_wilson"]
    );

    // traces grouped by stage
    let mut by_stage: std::collections::BTreeMap<usize, Vec<(f64, f64)>> = Default::default();
    let mut x1 = f64::NAN;
    for line in traces.lines().skip(1) {
        let c: Vec<&str> = line.split(',').collect();
        if c.len() < 6 {
            continue;
        }
        let k: usize = c[0]
            .parse()
            .map_err(|_| LabError::Config(format!("bad trace row `{line}`")))?;
        let t: f64 = c[1]
            .parse()
            .map_err(|_| LabError::Config(format!("bad trace row `{line}`")))?;
        let a: f64 = c[2]
            .parse()
            .map_err(|_| LabError::Config(format!("bad trace row `{line}`")))?;
        x1 = c[5].parse().unwrap_or(f64::NAN);
        by_stage.entry(k).or_default().push((t, a));
    }
    let stage_r: std::collections::BTreeMap<usize, f64> = list
        .first()
        .and_then(|c| c["stages"].as_array())
        .into_iter()
        .flatten()
        .filter_map(|s| Some((s["k"].as_u64()? as usize, s["R"].as_f64()?)))
        .collect();
    let mut written = Vec::new();
    let _ = writeln!(md, "\n## |S_t h(x)| near each stage time\n");
    for (k, pts) in &by_stage {
        let t_mark = stage_r.get(k).map(|r| x1 / (2.0 * r)).unwrap_or(f64::NAN);
        let name = format!("trace_k{k}.svg");
        fs::write(
            out.join(&name),
            trace_svg(&format!("stage {k}, x1 = {x1:.4}"), pts, t_mark),
        )?;
        let _ = writeln!(md, "![stage {k}]({name})\n");
        written.push(name);
    }
    fs::write(out.join("report.md"), &md)?;
    written.push("report.md".into());
    Ok(Outcome {
        ok: true,
        lines: vec![format!("report written for config {hash}")],
        artifacts: written,
    })
}

/// Certificate lookup used by tests and the report.
pub fn read_certificates(out: &Path) -> Result<Vec<Value>> {
    Ok(read_json(&out.join("certificates.json"))?["certificates"]
        .as_array()
        .cloned()
        .unwrap_or_default())
}
