use serde_json::Value;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fbci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fbci")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report(dir: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    v["config"]["output"] = Value::Null;
    v
}

#[test]
fn validate_prints_the_conjugate_points() {
    let o = fbci(&["validate"]);
    assert!(o.status.success());
    let s = stdout(&o);
    assert!(s.contains("s1* = 0.5"), "{s}");
    assert!(s.contains("s2* = 2.5"), "{s}");
}

#[test]
fn base_only_run_is_not_certified() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = fbci(&["densify", "--steps", "0", "--nx", "64", "--nt", "64", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["base.json", "final_u.csv", "final_v.csv", "profiles.json", "report.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let v = fbci(&["verify", "--nx", "64", "--nt", "64", "--out", out]);
    assert_eq!(v.status.code(), Some(3));
    assert!(stdout(&v).contains("two_phase.upper"));

    // a change to the initial row is caught by name
    let path = tmp.path().join("final_u.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[20] = {
        let mut f: Vec<&str> = lines[20].split(',').collect();
        let bumped = format!("{}", f[2].parse::<f64>().unwrap() + 1e-6);
        f[2] = &bumped;
        f.join(",")
    };
    fs::write(&path, lines.join("\n")).unwrap();
    let v = fbci(&["verify", "--out", out]);
    assert_eq!(v.status.code(), Some(3));
    assert!(stdout(&v).contains("initial_datum_exact"));

    let e = fbci(&["export", "--out", out]);
    assert!(e.status.success());
    assert!(tmp.path().join("base_u.csv").exists() && tmp.path().join("final_u.json").exists());
}

#[test]
fn default_run_certifies_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = fbci(&["densify", "--steps", "1", "--out", d.path().to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(report(a.path()), report(b.path()));
    let v = fbci(&["verify", "--out", a.path().to_str().unwrap()]);
    assert!(v.status.success(), "{}", stdout(&v));
    assert!(stdout(&v).contains("certified"));
}

#[test]
fn config_errors_name_their_module() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    let text = fbci::config::DEFAULT_CONFIG.replace("[window]", "[window]\nr3 = 1.0");
    fs::write(&cfg, text).unwrap();
    let o = fbci(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error: config.parse"));

    let text = fbci::config::DEFAULT_CONFIG.replace("r1 = 1.2", "r1 = 0.5");
    fs::write(&cfg, text).unwrap();
    let o = fbci(&["validate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error: flux."));

    let o = fbci(&["validate", "--config", tmp.path().join("missing.toml").to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error: config.read"));
}
