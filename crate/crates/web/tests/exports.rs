use loclab_web::{h_trace_json, stage_table_json, window_profile_json};
use serde_json::Value;

#[test]
fn stage_table_lists_demo_schedule() {
    let v: Value =
        serde_json::from_str(&stage_table_json(2, "0.124, 0.005, 1.5e-6").unwrap()).unwrap();
    let rows = v["stages"].as_array().unwrap();
    assert!(!rows.is_empty());
    let counts: Vec<u64> = rows
        .iter()
        .map(|r| r["lattice"].as_u64().unwrap())
        .collect();
    assert_eq!(*counts.last().unwrap(), 3816);
}

#[test]
fn bad_lists_are_rejected() {
    assert!(stage_table_json(2, "").is_err());
    assert!(stage_table_json(2, "0.1,abc").is_err());
    assert!(h_trace_json("0.124,0.005", 0.6, 0.1, 9, 5.0, 16).is_err());
}

#[test]
fn window_profile_peaks_near_center() {
    let v: Value =
        serde_json::from_str(&window_profile_json(0.005, 0.6, 20.0, 81).unwrap()).unwrap();
    let tc = v["tCenter"].as_f64().unwrap();
    let tau = v["tauMax"].as_f64().unwrap();
    let rows = v["rows"].as_array().unwrap();
    let best = rows
        .iter()
        .max_by(|a, b| a[1].as_f64().unwrap().total_cmp(&b[1].as_f64().unwrap()))
        .unwrap();
    assert!((best[0].as_f64().unwrap() - tc).abs() <= 2.0 * tau);
}

#[test]
fn h_trace_has_one_term_per_stage() {
    let v: Value =
        serde_json::from_str(&h_trace_json("0.124,0.005", 0.6, 0.1, 2, 5.0, 16).unwrap()).unwrap();
    let n = v["stages"].as_array().unwrap().len();
    for r in v["rows"].as_array().unwrap() {
        assert_eq!(r["terms"].as_array().unwrap().len(), n);
        assert!(r["abs"].as_f64().unwrap() >= 0.0);
    }
}
