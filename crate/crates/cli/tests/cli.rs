use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn fraclap(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fraclap"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env("FRACLAP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_column(path: &Path, column: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let c = header.iter().position(|h| *h == column).unwrap();
    lines.map(|l| l.split(',').nth(c).unwrap().parse().unwrap()).collect()
}

fn cycle(p: f64, theta: f64, layers: usize) -> Value {
    json!({
        "space": { "cycle": 64 },
        "params": { "p": p, "theta": theta },
        "extension": { "layers": layers },
    })
}

#[test]
fn build_writes_domain_with_expected_node_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", &cycle(2.0, 0.5, 12));
    let out = dir.path().join("out");
    let o = fraclap("build", &cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let domain = read_json(&out.join("domain.json"));
    assert_eq!(domain["nodes"].as_array().unwrap().len(), 64 * 13);
    let diag = read_json(&out.join("diagnostics.json"));
    assert!(diag["doubling"]["c_d"].as_f64().is_some());
    let report = read_json(&out.join("report.json"));
    let manifest: Vec<&str> = report["manifest"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert_eq!(manifest, ["domain.json", "diagnostics.json", "report.json"]);
    let mut on_disk: Vec<String> =
        std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    on_disk.sort();
    let mut listed: Vec<String> = manifest.iter().map(|s| s.to_string()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
}

#[test]
fn theta_out_of_range_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", &cycle(2.0, 1.0, 4));
    let o = fraclap("build", &cfg, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("theta must lie in (0, 1)"), "{}", stderr(&o));
}

#[test]
fn missing_space_file_exits_two() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "space": { "file": "does-not-exist.json" },
        "params": { "p": 2.0, "theta": 0.5 },
        "extension": { "layers": 4 },
    });
    let path = write_config(&dir, "c.json", &cfg);
    let o = fraclap("build", &path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_and_unknown_fields_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = fraclap("build", &dir.path().join("nope.json"), &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    let mut cfg = cycle(2.0, 0.5, 4);
    cfg["layrs"] = json!(3);
    let path = write_config(&dir, "c.json", &cfg);
    let o = fraclap("build", &path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn neumann_with_zero_data_is_zero() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(3.0, 0.4, 8);
    cfg["data"] = json!({ "generator": "zeros" });
    cfg["solve"] = json!({ "problem": "neumann" });
    let path = write_config(&dir, "c.json", &cfg);
    let out = dir.path().join("out");
    let o = fraclap("solve", &path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let u = csv_column(&out.join("solution.csv"), "u");
    assert_eq!(u.len(), 64 * 9);
    assert!(u.iter().all(|&x| x == 0.0));
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["details"]["energy"].as_f64(), Some(0.0));
}

#[test]
fn neumann_with_nonzero_mean_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(2.0, 0.5, 6);
    cfg["data"] = json!({ "generator": "atom", "at": 3 });
    cfg["solve"] = json!({ "problem": "neumann" });
    let path = write_config(&dir, "c.json", &cfg);
    let o = fraclap("solve", &path, &dir.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nonzero mean"), "{}", stderr(&o));
}

#[test]
fn frac_solve_round_trip() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(3.0, 0.3, 12);
    cfg["data"] = json!({ "generator": "random" });
    cfg["solve"] = json!({ "problem": "frac-solve" });
    cfg["seed"] = json!(7);
    let path = write_config(&dir, "c.json", &cfg);
    let out = dir.path().join("out");
    let o = fraclap("solve", &path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = read_json(&out.join("report.json"));
    let err = report["details"]["round_trip_error"].as_f64().unwrap();
    assert!(err <= 1e-5, "round trip {err}");
    assert_eq!(csv_column(&out.join("frac_solve.csv"), "value").len(), 64);
}

#[test]
fn dirichlet_and_exhaustion_write_solutions() {
    let dir = TempDir::new().unwrap();
    let mut cfg = json!({
        "space": { "path": 32 },
        "params": { "p": 2.0, "theta": 0.5 },
        "extension": { "layers": 8 },
        "base_point": 16,
        "base_radius": 2.0,
        "data": { "generator": "step", "plus": [14, 16], "minus": [16, 18] },
        "solve": { "problem": "neumann-exhaustion", "k_max": 3 },
    });
    let path = write_config(&dir, "c.json", &cfg);
    let out = dir.path().join("ex");
    let o = fraclap("solve", &path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_column(&out.join("exhaustion.csv"), "k"), [1.0, 2.0, 3.0]);

    cfg["solve"] = json!({ "problem": "dirichlet" });
    let path = write_config(&dir, "d.json", &cfg);
    let out = dir.path().join("di");
    let o = fraclap("solve", &path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let u = csv_column(&out.join("solution.csv"), "u");
    assert!(u.iter().all(|x| (-1.0 - 1e-9..=1.0 + 1e-9).contains(x)));
}

#[test]
fn oracle_suite_passes_at_p_two() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(2.0, 0.5, 24);
    cfg["extension"]["y_max"] = json!(64.0);
    let path = write_config(&dir, "c.json", &cfg);
    let out = dir.path().join("out");
    let o = fraclap("verify", &path, &out, &["--suite", "oracle-p2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&out.join("oracle-p2.json"))["verdict"], json!("pass"));
    assert!(out.join("oracle-p2.csv").exists());
}

#[test]
fn oracle_suite_is_informational_away_from_p_two() {
    let dir = TempDir::new().unwrap();
    let path = write_config(&dir, "c.json", &cycle(3.0, 0.3, 6));
    let out = dir.path().join("out");
    let o = fraclap("verify", &path, &out, &["--suite", "oracle-p2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&out.join("oracle-p2.json"))["verdict"], json!("informational"));
}

#[test]
fn stability_suite_passes_at_p_three() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(3.0, 0.3, 24);
    cfg["data"] = json!({ "generator": "random" });
    let path = write_config(&dir, "c.json", &cfg);
    let out = dir.path().join("out");
    let o = fraclap("verify", &path, &out, &["--suite", "stability", "--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rep = read_json(&out.join("stability.json"));
    assert_eq!(rep["verdict"], json!("pass"));
    assert!(rep["data"]["fit"]["slope"].as_f64().unwrap() >= 0.4);
}

#[test]
fn holder_below_threshold_is_informational() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(2.0, 0.5, 12);
    cfg["data"] = json!({ "generator": "step", "plus": [24, 32], "minus": [32, 40] });
    cfg["verify"] = json!({ "q": 0.5, "xi": 0, "r0": 16.0 });
    let path = write_config(&dir, "c.json", &cfg);
    let out = dir.path().join("out");
    let o = fraclap("verify", &path, &out, &["--suite", "holder"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = read_json(&out.join("holder.json"));
    assert_eq!(rep["verdict"], json!("informational"));
    assert_eq!(rep["data"]["below_threshold"], json!(true));
}

#[test]
fn unknown_suite_exits_two() {
    let dir = TempDir::new().unwrap();
    let path = write_config(&dir, "c.json", &cycle(2.0, 0.5, 4));
    let o = fraclap("verify", &path, &dir.path().join("out"), &["--suite", "spectral"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown suite"));
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let mut cfg = cycle(1.5, 0.4, 8);
    cfg["data"] = json!({ "generator": "random" });
    cfg["verify"] = json!({ "ensemble_size": 5 });
    let path = write_config(&dir, "c.json", &cfg);
    for cmd in ["solve", "verify"] {
        let a = dir.path().join(format!("{cmd}-a"));
        let b = dir.path().join(format!("{cmd}-b"));
        let extra: &[&str] = if cmd == "verify" { &["--suite", "equivalence"] } else { &[] };
        assert!(fraclap(cmd, &path, &a, extra).status.success());
        assert!(fraclap(cmd, &path, &b, extra).status.success());
        let files = read_json(&a.join("report.json"))["manifest"].clone();
        for f in files.as_array().unwrap() {
            let name = f.as_str().unwrap();
            assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{cmd}/{name}");
        }
    }
}

#[test]
fn saved_domain_reloads() {
    let dir = TempDir::new().unwrap();
    let path = write_config(&dir, "c.json", &cycle(2.0, 0.5, 6));
    let built = dir.path().join("built");
    assert!(fraclap("build", &path, &built, &[]).status.success());
    let cfg = json!({
        "domain": "built/domain.json",
        "data": { "generator": "random" },
    });
    let path = write_config(&dir, "s.json", &cfg);
    let out = dir.path().join("out");
    let o = fraclap("solve", &path, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_column(&out.join("solution.csv"), "u").len(), 64 * 7);
}
