//! Browser bindings for a handful of loclab computations.
//!
//! Every export returns a JSON string; errors surface as thrown strings.

use loclab::construction::{build_schedule, make_stage, Point, Schedule, ScheduleOverrides, Stage};
use loclab::divergence::{schedule_stages, time_window};
use loclab::propagator::{propagate_f_v_auto, propagate_h_stages};
use loclab::quad::QuadratureSpec;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const DELTA: f64 = 0.5;

fn spec() -> QuadratureSpec {
    QuadratureSpec::new(1e-8, 1e-12)
}

fn parse_v_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.parse::<f64>()
                .map_err(|e| format!("bad scale {p:?}: {e}"))
        })
        .collect()
}

fn explicit_schedule(n: usize, v_list: &[f64]) -> Result<Schedule, String> {
    let v1 = *v_list.first().ok_or("empty scale list")?;
    let o = ScheduleOverrides {
        v_list: Some(v_list.to_vec()),
        ..Default::default()
    };
    build_schedule(n, v1, DELTA, v_list.len(), &o).map_err(|e| e.to_string())
}

/// `|S_t f_v(x1)|` over `t_c ± span·τ_max` with `t_c = x1/(2R)`.
pub fn window_profile_json(v: f64, x1: f64, span: f64, points: usize) -> Result<String, String> {
    let stage = Stage::from_v(2, v).map_err(|e| e.to_string())?;
    let w = time_window(&stage, x1, 1.0);
    let m = points.clamp(8, 2000);
    let spec = spec();
    let mut rows = Vec::with_capacity(m);
    for j in 0..m {
        let t = w.t_center + span * w.tau_max * (2.0 * j as f64 / (m - 1) as f64 - 1.0);
        if t == 0.0 {
            continue;
        }
        let r = propagate_f_v_auto(&stage, t, x1, &spec).map_err(|e| e.to_string())?;
        rows.push(json!([t, r.abs(), r.mode.as_str()]));
    }
    Ok(json!({
        "v": v,
        "R": stage.r,
        "tCenter": w.t_center,
        "tauMax": w.tau_max,
        "rows": rows,
    })
    .to_string())
}

/// Stage parameters and tail-sum checks for an explicit list of scales.
pub fn stage_table_json(n: usize, v_list: &str) -> Result<String, String> {
    let v = parse_v_list(v_list)?;
    let schedule = explicit_schedule(n, &v)?;
    let mut rows = Vec::new();
    for k in schedule.stages_used() {
        let st = make_stage(&schedule, k).map_err(|e| e.to_string())?;
        let tails = schedule.tail_sums(k).map_err(|e| e.to_string())?;
        rows.push(json!({
            "k": k,
            "v": st.v,
            "R": st.r,
            "D": st.d,
            "p": st.p,
            "lattice": st.lattice_count(),
            "amplitude": st.amplitude(),
            "hiRatio": tails.hi_ratio,
            "loRatio": tails.lo_ratio,
            "hiOk": tails.hi_bound_holds(),
            "loOk": tails.lo_bound_holds(),
        }));
    }
    Ok(json!({ "n": n, "stages": rows }).to_string())
}

/// `|S_t h(x)|` near `t_k` for stage `k`, with each stage's term.
pub fn h_trace_json(
    v_list: &str,
    x1: f64,
    x2: f64,
    k: usize,
    span: f64,
    points: usize,
) -> Result<String, String> {
    let v = parse_v_list(v_list)?;
    let schedule = explicit_schedule(2, &v)?;
    let stages = schedule_stages(&schedule).map_err(|e| e.to_string())?;
    let st = stages
        .iter()
        .find(|s| s.k == k)
        .ok_or_else(|| format!("stage {k} is not in use"))?;
    let p = Point::new(x1, vec![x2]);
    let w = time_window(st, x1, 1.0);
    let m = points.clamp(8, 1000);
    let spec = spec();
    let mut rows: Vec<Value> = Vec::with_capacity(m);
    for j in 0..m {
        let t = w.t_center + span * w.tau_max * (2.0 * j as f64 / (m - 1) as f64 - 1.0);
        if t == 0.0 {
            continue;
        }
        let h = propagate_h_stages(&stages, t, &p, &spec).map_err(|e| e.to_string())?;
        let terms: Vec<f64> = h.terms.iter().map(|s| s.term.abs_upper()).collect();
        rows.push(json!({
            "t": t,
            "abs": h.total.abs(),
            "err": h.total.est_error,
            "exact": h.total.is_exact(),
            "terms": terms,
        }));
    }
    Ok(json!({
        "k": k,
        "tCenter": w.t_center,
        "tauMax": w.tau_max,
        "stages": stages.iter().map(|s| s.k).collect::<Vec<_>>(),
        "rows": rows,
    })
    .to_string())
}

#[wasm_bindgen]
pub fn window_profile(v: f64, x1: f64, span: f64, points: usize) -> Result<String, JsValue> {
    window_profile_json(v, x1, span, points).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn stage_table(n: usize, v_list: &str) -> Result<String, JsValue> {
    stage_table_json(n, v_list).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn h_trace(
    v_list: &str,
    x1: f64,
    x2: f64,
    k: usize,
    span: f64,
    points: usize,
) -> Result<String, JsValue> {
    h_trace_json(v_list, x1, x2, k, span, points).map_err(|e| JsValue::from_str(&e))
}
