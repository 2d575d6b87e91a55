//! Drives the binary: exit codes, oracle protocol, artifacts and reloads.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_itergauss");

// Standard Gaussian in d dims; answers single and batched requests.
const GOOD_ORACLE: &str = r#"
import json, sys
def ev(x):
    return {"logp": -0.5 * sum(v * v for v in x), "score": [-v for v in x]}
for line in sys.stdin:
    req = json.loads(line)
    if "batch" in req:
        print(json.dumps({"results": [ev(x) for x in req["batch"]]}), flush=True)
    else:
        print(json.dumps(ev(req["x"])), flush=True)
"#;

// Answers the handshake, then returns a score of the wrong length.
const BAD_ORACLE: &str = r#"
import json, sys
n = 0
for line in sys.stdin:
    x = json.loads(line)["x"]
    n += 1
    score = [-v for v in x] if n == 1 else [0.0]
    print(json.dumps({"logp": 0.0, "score": score}), flush=True)
"#;

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_gaussian_config(dir: &Path) -> String {
    write(
        dir,
        "cfg.json",
        r#"{"target":{"type":"gaussian","dim":2,"kappa":3.0},"family":{"type":"affine"},
            "iterations":2,"seed":11,"mfvi":{"steps":60,"mc_batch":500},
            "eval_samples":300,"reference":{"samples":300}}"#,
    )
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = write(dir.path(), "a.json", r#"{"experiment":"logistic","no_such_field":1}"#);
    let bad_value = write(dir.path(), "b.json", r#"{"dims":[1]}"#);
    let out = dir.path().join("o").to_string_lossy().into_owned();
    for (sub, cfg) in [("logistic", &bad_key), ("gaussian-sweep", &bad_value), ("run", &bad_value)] {
        let o = run(&[sub, "--config", cfg, "--out", &out]);
        assert_eq!(o.status.code(), Some(2), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = run(&["run", "--config", "/nonexistent/cfg.json"]);
    assert_eq!(o.status.code(), Some(2));
    // a custom run without a target
    let empty = write(dir.path(), "c.json", "{}");
    assert_eq!(run(&["run", "--config", &empty, "--out", &out]).status.code(), Some(2));
}

#[test]
fn sweep_writes_versioned_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.json", r#"{"dims":[2],"kappas":[1.0,4.0],"strategies":["pca"]}"#);
    let out = dir.path().join("out");
    let o = run(&["gaussian-sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--replicates", "3", "--seed", "4"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert!(lines[0].starts_with("# itergauss sweep v1 config_hash=") && lines[0].ends_with("seed=4"));
    assert_eq!(lines[1], "d,kappa,strategy,mean_iters,sd_iters,replicates,censored");
    assert!(lines[2].starts_with("2,1.0000000000000000e0,pca,0.0000000000000000e0,"));
    assert!(lines[3].starts_with("2,4.0000000000000000e0,pca,1.0000000000000000e0,"));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn builtin_run_is_deterministic_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_gaussian_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["run", "--config", &cfg, "--out", d.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["run.json", "metrics.csv", "manifest.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let last = metrics.lines().last().unwrap();
    assert!(last.starts_with("run-k2,2,") && last.ends_with(",11,ok"), "{last}");

    let e = dir.path().join("e");
    let o = run(&["eval", "--config", &cfg, "--run", a.join("run.json").to_str().unwrap(), "--out", e.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let evald = fs::read_to_string(e.join("eval_metrics.csv")).unwrap();
    let row = |s: &str| s.lines().last().unwrap().split(',').map(String::from).collect::<Vec<_>>();
    let (stored, again) = (row(&metrics), row(&evald));
    for col in 2..7 {
        let (x, y): (f64, f64) = (stored[col].parse().unwrap(), again[col].parse().unwrap());
        assert!((x - y).abs() <= 1e-9 * x.abs().max(1.0), "column {col}: {x} vs {y}");
    }
}

#[test]
fn oracle_targets_run_and_violations_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let good = write(dir.path(), "good.py", GOOD_ORACLE);
    let bad = write(dir.path(), "bad.py", BAD_ORACLE);
    let cfg = |script: &str, name: &str| {
        write(
            dir.path(),
            name,
            &serde_json::json!({
                "target": {"type": "oracle", "command": ["python3", script], "dim": 2},
                "family": {"type": "affine"},
                "mfvi": {"steps": 10, "mc_batch": 100},
                "h_samples": 100,
                "eval_samples": 100,
                "reference": {"samples": 100, "burnin": 100, "thin": 1},
            })
            .to_string(),
        )
    };
    let out = dir.path().join("g");
    let o = run(&["run", "--config", &cfg(&good, "g.json"), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("run.json").exists());

    let o = run(&["run", "--config", &cfg(&bad, "b.json"), "--out", dir.path().join("b").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    let missing = cfg("/nonexistent/oracle.py", "m.json");
    let o = run(&["run", "--config", &missing, "--out", dir.path().join("m").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn small_logistic_run_persists_chains() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "l.json",
        r#"{"rk":[1,2],"mfvi":{"steps":10,"mc_batch":200},"h_samples":200,"eval_samples":200,
            "reference":{"samples":200,"burnin":500,"thin":2}}"#,
    );
    let out = dir.path().join("l");
    let o = run(&["logistic", "--config", &cfg, "--out", out.to_str().unwrap(), "--replicates", "2", "--seed", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let ids: Vec<&str> = csv.lines().skip(2).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        ids,
        ["r00-identity", "r00-random", "r00-pca", "r00-R1", "r00-R2", "r01-identity", "r01-random", "r01-pca", "r01-R1", "r01-R2"]
    );
    for id in &ids {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out.join("chains").join(format!("{id}.json"))).unwrap()).unwrap();
        assert!(v["config_hash"].is_string() && v["chain"]["layers"].is_array());
    }
}
