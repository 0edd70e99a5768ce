//! Exit codes, determinism and artifact checks of the `loclab` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loclab"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Small divergence run: two coarse stages, few samples.
fn write_small_config(dir: &Path) -> String {
    let p = dir.join("small.conf");
    fs::write(
        &p,
        "# quick run\nv_list = 0.124, 0.005\nk_max = 2\nsamples = 6\nrefine = 4\ntrace_points = 16\nledger_stages = 16\n",
    )
    .unwrap();
    p.display().to_string()
}

#[test]
fn dimension_one_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("n1.conf");
    fs::write(&conf, "n = 1\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&[
        "verify-bounds",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("n >= 2"), "{}", stderr(&o));
}

#[test]
fn short_stage_list_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "scaling",
        "--stages",
        "3,4,5",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("at least 4"));
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "colour = blue\n").unwrap();
    let o = run(&["search", "--config", conf.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn absurd_tolerance_names_the_failing_operation() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("tol.conf");
    fs::write(&conf, "quad_rel_tol = 1e-16\nquad_abs_tol = 1e-30\n").unwrap();
    let o = run(&[
        "verify-bounds",
        "--config",
        conf.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    let e = stderr(&o);
    assert!(e.contains("did not converge in propagate"), "{e}");
}

#[test]
fn report_lists_missing_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    for m in [
        "verify-bounds.manifest.json",
        "scaling.manifest.json",
        "certify.manifest.json",
    ] {
        assert!(e.contains(m), "{e}");
    }
}

#[test]
fn report_refuses_mixed_hashes() {
    let dir = tempfile::tempdir().unwrap();
    for (c, h) in [
        ("verify-bounds", "aa"),
        ("scaling", "aa"),
        ("certify", "bb"),
    ] {
        let m = format!(
            r#"{{"command":"{c}","configHash":"{h}","config":"","ok":true,"artifacts":[]}}"#
        );
        fs::write(dir.path().join(format!("{c}.manifest.json")), m).unwrap();
    }
    let o = run(&["report", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("different configs"), "{}", stderr(&o));
}

#[test]
fn certify_is_deterministic_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let conf = write_small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "certify",
            "--config",
            &conf,
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    // manifests differ only in the recorded out_dir
    for f in [
        "certificates.json",
        "empirical_k1.csv",
        "empirical_k2.csv",
        "limsup.json",
        "traces.csv",
        "ledger.csv",
    ] {
        let x = fs::read_to_string(a.join(f)).unwrap();
        let y = fs::read_to_string(b.join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
    let cert: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("certificates.json")).unwrap()).unwrap();
    let first = &cert["certificates"][0];
    for key in ["x", "stages", "supportMargin", "scheduleHash", "seed"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    for key in [
        "k",
        "v",
        "R",
        "t",
        "absSf",
        "absSG",
        "absProduct",
        "crossMeasured",
        "crossBound",
        "valid",
    ] {
        assert!(first["stages"][0].get(key).is_some(), "{key}");
    }
    assert_eq!(first["seed"], 7);

    // the report needs the other two commands under the same config
    for cmd in ["verify-bounds", "scaling"] {
        let o = run(&[
            cmd,
            "--config",
            &conf,
            "--seed",
            "7",
            "--out",
            a.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let o = run(&["report", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = fs::read_to_string(a.join("report.md")).unwrap();
    assert!(md.contains("| claim | expected | measured | status |"));
    let svg = fs::read_to_string(a.join("trace_k1.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("<polyline"));

    // a different seed changes the hash and the report refuses the mix
    let o = run(&[
        "scaling",
        "--config",
        &conf,
        "--seed",
        "8",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let o = run(&["report", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn scaling_writes_fit_records() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["scaling", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fits: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("fits.json")).unwrap()).unwrap();
    let hs = fits["fits"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["quantity"] == "Hs_hv")
        .unwrap();
    assert!((hs["expected_slope"].as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-15);
    let f = fits["fits"]
        .as_array()
        .unwrap()
        .iter()
        .find(|f| f["quantity"] == "L2_fv")
        .unwrap();
    assert!((f["slope"].as_f64().unwrap() - 0.5).abs() < 1e-6);
    let csv = fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    assert!(csv.starts_with("k,v,R,quantity,measured,bound,constant\n"));
}
