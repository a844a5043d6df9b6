use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const LAPLACE_1D: &str = r#"{
    "schema_version": 1,
    "dimension": 1,
    "n": 63,
    "coefficients": {"preset": "constant"},
    "k": 5,
    "steps": 12,
    "source": [
        {"preset": "sine", "amplitude": 1.0, "modes": [1]},
        {"preset": "sine", "amplitude": 0.5, "modes": [3]}
    ]
}"#;

fn run(args: &[&str], config: &str, dir: &Path) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    let mut full: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    full.extend(["--config".to_string(), cfg.display().to_string()]);
    if !args.contains(&"--out") {
        full.extend(["--out".to_string(), dir.join("out").display().to_string()]);
    }
    Command::new(env!("CARGO_BIN_EXE_ellipnet")).args(&full).output().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("out").join(name)).unwrap()
}

fn json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn solve_writes_its_artifacts() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["solve"], LAPLACE_1D, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let trace = read(tmp.path(), "trace.csv");
    assert_eq!(trace.lines().next(), Some("t,error,ratio,objective"));
    assert_eq!(trace.lines().count(), 1 + 13);
    let eig = read(tmp.path(), "eigenpairs.csv");
    assert_eq!(eig.lines().next(), Some("index,eigenvalue,residual"));
    assert_eq!(eig.lines().count(), 1 + 6);
    let report = json(tmp.path(), "bound_report.json");
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["budget"]["status"], "pass");
    assert_eq!(report["budget"]["T"], 12);
    assert!(report["violations"].as_array().unwrap().is_empty());
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let tmp = TempDir::new().unwrap();
    run(&["solve"], LAPLACE_1D, tmp.path());
    let trace = read(tmp.path(), "trace.csv");
    let row: Vec<&str> = trace.lines().nth(2).unwrap().split(',').collect();
    let mantissa = row[1].split('e').next().unwrap();
    assert_eq!(mantissa.len(), "1.".len() + 16, "{}", row[1]);
}

#[test]
fn identical_runs_give_identical_bytes() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for cmd in ["solve", "perturb-sweep", "netgrow", "certify"] {
        let ra = run(&[cmd, "--seed", "7"], LAPLACE_1D, a.path());
        let rb = run(&[cmd, "--seed", "7"], LAPLACE_1D, b.path());
        assert_eq!(ra.status.code(), Some(0), "{cmd}: {}", stderr(&ra));
        assert_eq!(rb.status.code(), Some(0));
    }
    let mut names: Vec<_> = fs::read_dir(a.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 8);
    for name in names {
        let name = name.to_str().unwrap();
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
}

#[test]
fn gap_violation_exits_with_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = LAPLACE_1D.replace("\"steps\": 12,", "\"steps\": 12, \"perturbation\": {\"eps_a\": 0.5},");
    let out = run(&["solve"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gap condition"), "{}", stderr(&out));
}

#[test]
fn config_errors_exit_two() {
    let tmp = TempDir::new().unwrap();
    let unknown = LAPLACE_1D.replace("\"k\": 5,", "\"k\": 5, \"colour\": \"red\",");
    assert_eq!(run(&["solve"], &unknown, tmp.path()).status.code(), Some(2));
    let negative = LAPLACE_1D.replace("\"steps\": 12,", "\"steps\": 12, \"sweep\": {\"epsilons\": [-1e-4]},");
    assert_eq!(run(&["perturb-sweep"], &negative, tmp.path()).status.code(), Some(2));
    let version = LAPLACE_1D.replace("\"schema_version\": 1", "\"schema_version\": 3");
    assert_eq!(run(&["certify"], &version, tmp.path()).status.code(), Some(2));
    let missing = Command::new(env!("CARGO_BIN_EXE_ellipnet"))
        .args(["solve", "--config", "/nonexistent/config.json"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let elliptic = LAPLACE_1D.replace(
        "{\"preset\": \"constant\"}",
        "{\"preset\": \"affine\", \"a0\": 0.2, \"slope\": [-0.5]}",
    );
    assert_eq!(run(&["solve"], &elliptic, tmp.path()).status.code(), Some(2));
}

#[test]
fn step_cap_makes_the_budget_inapplicable() {
    let tmp = TempDir::new().unwrap();
    let cfg = r#"{
        "schema_version": 1, "dimension": 1, "n": 63, "k": 2, "steps": 600,
        "coefficients": {"preset": "constant"},
        "perturbation": {"eps_a": 1e-4},
        "source": [{"preset": "sine", "amplitude": 1.0, "modes": [1]}]
    }"#;
    let out = run(&["solve"], cfg, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report = json(tmp.path(), "bound_report.json");
    assert_eq!(report["budget"]["status"], "inapplicable");
    let cert = run(&["certify"], cfg, tmp.path());
    assert_eq!(cert.status.code(), Some(0), "{}", stderr(&cert));
    assert_eq!(json(tmp.path(), "certificate.json")["status"], "inapplicable");
}

#[test]
fn sweep_default_has_no_failures() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["perturb-sweep"], LAPLACE_1D, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let sweep = json(tmp.path(), "sweep.json");
    assert_eq!(sweep["schema_version"], 1);
    let records = sweep["records"].as_array().unwrap();
    assert!(records.len() >= 30);
    assert!(records.iter().all(|r| r["status"] != "fail"));
    for key in ["lemma", "shape", "epsilon", "LHS", "RHS", "slack", "status"] {
        assert!(records[0].get(key).is_some(), "missing {key}");
    }
}

#[test]
fn sweep_at_zero_epsilon_passes_everything_applicable() {
    let tmp = TempDir::new().unwrap();
    let cfg = LAPLACE_1D.replace("\"steps\": 12,", "\"steps\": 12, \"sweep\": {\"epsilons\": [0.0]},");
    let out = run(&["perturb-sweep"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(0));
    let sweep = json(tmp.path(), "sweep.json");
    let records = sweep["records"].as_array().unwrap();
    assert!(records.iter().any(|r| r["status"] == "pass"));
    assert!(records.iter().all(|r| r["status"] == "pass"));
}

#[test]
fn netgrow_counts_and_dump_agree() {
    let tmp = TempDir::new().unwrap();
    let zero = LAPLACE_1D.replace("\"steps\": 12", "\"steps\": 0");
    assert_eq!(run(&["netgrow"], &zero, tmp.path()).status.code(), Some(0));
    let counts = read(tmp.path(), "counts.csv");
    assert_eq!(counts.lines().count(), 2);
    assert!(counts.lines().nth(1).unwrap().starts_with("0,1,"));

    let three_d = r#"{
        "schema_version": 1, "dimension": 3, "n": 5, "k": 2, "steps": 2,
        "coefficients": {"preset": "trigonometric", "a0": 2.0, "amplitude": 0.1, "modes": [1, 1, 1], "c0": 1.0},
        "source": [{"preset": "sine", "amplitude": 1.0, "modes": [1, 1, 1]}]
    }"#;
    let out = run(&["netgrow"], three_d, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let counts = read(tmp.path(), "counts.csv");
    let last: Vec<&str> = counts.lines().last().unwrap().split(',').collect();
    assert_eq!(last[0], "2");
    let n2: u64 = last[1].parse().unwrap();
    let dump = json(tmp.path(), "graph.json");
    assert_eq!(dump["param_count"].as_u64(), Some(n2));
    let nodes = dump["nodes"].as_array().unwrap();
    assert_eq!(dump["node_count"].as_u64(), Some(nodes.len() as u64));
    let params: u64 = nodes.iter().map(|n| n["params"].as_u64().unwrap()).sum();
    assert_eq!(params, n2);

    let one_d = LAPLACE_1D
        .replace("\"steps\": 12", "\"steps\": 3")
        .replace("{\"preset\": \"constant\"}", "{\"preset\": \"affine\", \"a0\": 1.0, \"slope\": [0.5]}");
    assert_eq!(run(&["netgrow"], &one_d, tmp.path()).status.code(), Some(0));
    for line in read(tmp.path(), "counts.csv").lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let n: f64 = cols[1].parse().unwrap();
        let bound: f64 = cols[2].parse().unwrap();
        assert!(n <= bound, "{line}");
    }
}

#[test]
fn certify_unperturbed_is_tight() {
    let tmp = TempDir::new().unwrap();
    let out = run(&["certify"], LAPLACE_1D, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let cert = json(tmp.path(), "certificate.json");
    assert_eq!(cert["status"], "tight");
    assert_eq!(cert["graph_grid"]["asserted"], true);
    for key in [
        "tilde_spn_over_lambda1",
        "tilde_source_shift",
        "tilde_delta_u_star",
        "tilde_network",
        "epsilon",
        "R",
        "eta",
        "C",
    ] {
        assert!(cert["budget"].get(key).is_some(), "missing {key}");
    }
    assert_eq!(read(tmp.path(), "residual.csv").lines().count(), 1 + 13);
}

#[test]
fn certify_perturbed_passes() {
    let tmp = TempDir::new().unwrap();
    let cfg = LAPLACE_1D.replace(
        "\"steps\": 12,",
        "\"steps\": 12, \"perturbation\": {\"eps_a\": 1e-4, \"shape\": \"scaling\"}, \"source_nn\": {\"preset\": \"perturbed\", \"amplitude\": 1e-8, \"modes\": [2]},",
    );
    let out = run(&["certify"], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let cert = json(tmp.path(), "certificate.json");
    assert!(cert["status"] == "pass" || cert["status"] == "tight", "{}", cert["status"]);
    assert_eq!(cert["graph_grid"]["asserted"], false);
}

#[test]
fn out_flag_overrides_config() {
    let tmp = TempDir::new().unwrap();
    let target = tmp.path().join("elsewhere");
    let cfg = LAPLACE_1D.replace("\"k\": 5,", &format!("\"k\": 5, \"out\": \"{}\",", tmp.path().join("ignored").display()));
    let out = run(&["solve", "--out", target.to_str().unwrap()], &cfg, tmp.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(target.join("trace.csv").exists());
    assert!(!tmp.path().join("ignored").exists());
}
