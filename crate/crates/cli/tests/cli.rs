use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn survmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_survmamba"))
        .args(args)
        .env("SURVMAMBA_THREADS", "2")
        .output()
        .expect("spawn survmamba")
}

fn stdout_ok(args: &[&str]) -> String {
    let out = survmamba(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SPEC: &str = r#"{"n_patients": 30, "patches_per_region": 3, "d_raw": 6, "planted_dims": 2,
    "processes": 3, "functions_per_process": 2, "genes": 24, "genes_per_function": 3}"#;

const CONFIG: &str = r#"{"epochs": 2, "model": {"d": 4, "e": 8, "n": 2, "w": 2, "hidden": 4}}"#;

#[test]
fn synth_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    fs::write(d.join("train.json"), CONFIG).unwrap();
    let data = d.join("cohort");
    stdout_ok(&[
        "synth",
        "--spec",
        s(&d.join("spec.json")),
        "--seed",
        "3",
        "--out",
        s(&data),
    ]);
    let manifest = data.join("manifest.json");
    assert!(manifest.exists());

    let ckpt = d.join("model.smck");
    let log = stdout_ok(&[
        "train",
        "--data",
        s(&manifest),
        "--fold",
        "0",
        "--config",
        s(&d.join("train.json")),
        "--out",
        s(&ckpt),
    ]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch ")).count(), 2, "{log}");
    assert!(ckpt.exists());

    let report = stdout_ok(&["eval", "--data", s(&manifest), "--fold", "0", "--ckpt", s(&ckpt)]);
    let c: f64 = report
        .lines()
        .find_map(|l| l.strip_prefix("c_index "))
        .unwrap_or_else(|| panic!("no c_index line in {report}"))
        .trim()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&c));
    assert!(report.contains("logrank chi2"), "{report}");
    let km = fs::read_to_string(d.join("model.smck.fold0.km.csv")).unwrap();
    assert!(km.starts_with("group,time,at_risk,events,survival"), "{km}");

    let again = stdout_ok(&["eval", "--data", s(&manifest), "--fold", "0", "--ckpt", s(&ckpt)]);
    assert_eq!(again, report);
}

#[test]
fn km_from_plain_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("risks.txt"), "id risk\na 4\nb 3\nc 2\nd 1\n").unwrap();
    fs::write(d.join("outcomes.txt"), "1 1\n2 1\n10 1\n11 1\n").unwrap();
    let out = stdout_ok(&[
        "km",
        "--risks",
        s(&d.join("risks.txt")),
        "--outcomes",
        s(&d.join("outcomes.txt")),
    ]);
    assert!(out.contains("group,time,at_risk,events,survival"), "{out}");
    let summary = out.lines().find(|l| l.starts_with("# logrank")).expect("summary line");
    assert!(summary.contains("chi2=2.882"), "{summary}");
    assert!(summary.contains("c_index=1"), "{summary}");
}

#[test]
fn scan_bench_reports_every_mode() {
    let out = stdout_ok(&[
        "scan-bench",
        "--len",
        "64",
        "--channels",
        "4",
        "--state",
        "4",
        "--reps",
        "2",
    ]);
    for mode in ["recurrent", "parallel", "conv"] {
        let line = out
            .lines()
            .find(|l| l.starts_with(&format!("bench mode={mode} ")))
            .unwrap_or_else(|| panic!("no {mode} line in {out}"));
        let dev: f64 = line
            .split("max_dev=")
            .nth(1)
            .unwrap()
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap();
        assert!(dev <= 1e-8, "{line}");
    }
}

#[test]
fn gradcheck_single_module() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model": {"d": 4, "e": 8, "n": 2, "w": 2, "t_bins": 3, "hidden": 2}}"#,
    )
    .unwrap();
    let out = stdout_ok(&["gradcheck", "--config", s(&cfg), "--module", "head"]);
    assert!(out.lines().skip(1).all(|l| l.starts_with("head")), "{out}");
    assert!(!out.contains("FAIL"), "{out}");
}

#[test]
fn missing_manifest_is_reported_with_its_path() {
    let out = survmamba(&[
        "eval",
        "--data",
        "/nonexistent/manifest.json",
        "--fold",
        "0",
        "--ckpt",
        "/nonexistent/m",
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("/nonexistent/manifest.json"), "{err}");
}

#[test]
fn unknown_mode_is_rejected() {
    let out = survmamba(&["scan-bench", "--mode", "quantum"]);
    assert!(!out.status.success());
}
