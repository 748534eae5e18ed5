use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pirl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pirl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pirl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_dataset(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("tiny.csv");
    ok(&[
        "synth",
        "--subjects",
        "3",
        "--per-subject",
        "8",
        "--length",
        "16",
        "--seed",
        "3",
        "--out",
        p(&data),
    ]);
    data
}

#[test]
fn synth_writes_expected_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for path in [&a, &b] {
        ok(&[
            "synth",
            "--subjects",
            "6",
            "--per-subject",
            "40",
            "--length",
            "128",
            "--seed",
            "7",
            "--out",
            p(path),
        ]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 241);
    assert!(text.starts_with("subject_id,label,v0,v1,"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let out = pirl(&["synth", "--subjects", "0", "--out", "x.csv"]);
    assert_eq!(out.status.code(), Some(2));
    let out = pirl(&["run", "--data", "x.csv", "--variants", "baseline,mmd-triplet"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("mmd+triplet") && err.contains("person-specific"), "{err}");
    assert_eq!(pirl(&["bogus"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let out = pirl(&["run", "--data", "/nonexistent/data.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/data.csv"));
}

#[test]
fn help_documents_flags_and_defaults() {
    for cmd in ["synth", "run", "export-latents"] {
        let text = ok(&[cmd, "--help"]);
        assert!(text.contains("--"), "{cmd}");
    }
    let run = ok(&["run", "--help"]);
    for needle in [
        "[default: 100]",
        "[default: 32]",
        "[default: 0.001]",
        "[default: 0.2]",
        "[default: 10]",
        "--parallel-trials",
    ] {
        assert!(run.contains(needle), "missing {needle}");
    }
    ok(&["--help"]);
}

#[test]
fn run_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let base = [
        "run",
        "--data",
        p(&data),
        "--variants",
        "baseline,mmd",
        "--trials",
        "4",
        "--epochs",
        "1",
        "--seed",
        "1",
    ];
    let out1 = dir.path().join("r1");
    let out2 = dir.path().join("r2");
    ok(&[&base[..], &["--out", p(&out1)]].concat());
    ok(&[&base[..], &["--out", p(&out2), "--parallel-trials", "3"]].concat());
    for name in [
        "report.txt",
        "report.json",
        "metrics.ndjson",
        "checkpoints/baseline-trial0.ckpt",
        "checkpoints/mmd-trial3.ckpt",
    ] {
        assert_eq!(
            fs::read(out1.join(name)).unwrap(),
            fs::read(out2.join(name)).unwrap(),
            "{name}"
        );
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out1.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["variants"].as_array().unwrap().len(), 2);
    assert_eq!(report["comparison"]["pairs"].as_array().unwrap().len(), 1);
    let metrics = fs::read_to_string(out1.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().filter(|l| l.contains("\"phase\":\"eval\"")).count(), 8);

    // feeding the echoed config back reproduces the report
    let out3 = dir.path().join("r3");
    ok(&["run", "--config", p(&out1.join("config.toml")), "--out", p(&out3)]);
    assert_eq!(
        fs::read(out1.join("report.json")).unwrap(),
        fs::read(out3.join("report.json")).unwrap()
    );
    let echo1 = fs::read_to_string(out1.join("config.toml")).unwrap();
    let echo3 = fs::read_to_string(out3.join("config.toml")).unwrap();
    assert_eq!(echo1.replace(p(&out1), p(&out3)), echo3);
}

#[test]
fn single_trial_reports_zero_sd() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("r");
    let text = ok(&[
        "run",
        "--data",
        p(&data),
        "--variants",
        "baseline,triplet",
        "--trials",
        "1",
        "--epochs",
        "1",
        "--out",
        p(&out),
    ]);
    assert!(text.contains("no statistical comparison"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    for v in report["variants"].as_array().unwrap() {
        assert_eq!(v["sd_accuracy"], 0.0);
    }
}

#[test]
fn export_latents_dumps_every_sample() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let out = dir.path().join("r");
    ok(&[
        "run",
        "--data",
        p(&data),
        "--variants",
        "baseline",
        "--trials",
        "1",
        "--epochs",
        "1",
        "--out",
        p(&out),
    ]);
    let ckpt = out.join("checkpoints/baseline-trial0.ckpt");
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for dump in [&a, &b] {
        let text = ok(&[
            "export-latents",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--out",
            p(dump),
        ]);
        assert!(text.contains("heterogeneity score"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let text = fs::read_to_string(&a).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 3 + 8 + 2);
    assert_eq!(header[3], "e0");
    assert_eq!(header[10], "e7");
    assert_eq!(&header[11..], ["pc1", "pc2"]);
    assert_eq!(text.lines().count(), 1 + 24);
    assert!(text.lines().skip(1).any(|l| l.contains(",test,")));

    let other = dir.path().join("other.csv");
    ok(&[
        "synth",
        "--subjects",
        "3",
        "--per-subject",
        "4",
        "--length",
        "32",
        "--out",
        p(&other),
    ]);
    let bad = pirl(&[
        "export-latents",
        "--checkpoint",
        p(&ckpt),
        "--data",
        p(&other),
        "--out",
        p(&a),
    ]);
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(
        err.contains("baseline-trial0.ckpt") && err.contains("other.csv"),
        "{err}"
    );
}
