use std::path::Path;
use std::process::{Command, Output};

fn iag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iag"))
        .args(args)
        .env("IAG_LOG_LEVEL", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = iag(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, num: &str, seed: &str) {
    ok(&["gen-data", "--out", s(dir), "--num", num, "--dims", "8,12,12", "--seed", seed]);
}

#[test]
fn gen_data_writes_the_requested_split() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    let out = ok(&[
        "gen-data", "--out", s(&dir), "--num", "10", "--pos-frac", "0.4", "--labeled-frac", "0.5", "--dims", "8,12,12",
    ]);
    assert!(out.contains("wrote 10 volumes (4 positive, 2 voxel-labeled)"), "{out}");
    let files = std::fs::read_dir(&dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "iagv")).count();
    assert_eq!(files, 10);
    assert!(dir.join("manifest.json").exists());
}

#[test]
fn train_eval_report_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("train");
    let test = tmp.path().join("test");
    gen(&data, "8", "1");
    gen(&test, "4", "2");
    let common = ["--iters", "20", "--width", "4", "--layers", "2", "--seed", "3"];
    let m1 = tmp.path().join("a.iagm");
    let m2 = tmp.path().join("b.iagm");
    let h1 = tmp.path().join("a.csv");
    for (m, h) in [(&m1, &h1), (&m2, &tmp.path().join("b.csv"))] {
        let mut args = vec!["train", "--data", s(&data), "--out", s(m), "--history", s(h)];
        args.extend(common);
        ok(&args);
    }
    assert_eq!(std::fs::read(&m1).unwrap(), std::fs::read(&m2).unwrap());
    assert_eq!(std::fs::read_to_string(&h1).unwrap().lines().count(), 21);

    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    for r in [&r1, &r2] {
        ok(&["eval", "--model", s(&m1), "--data", s(&test), "--out", s(r)]);
    }
    assert_eq!(std::fs::read(r1.join("cases.csv")).unwrap(), std::fs::read(r2.join("cases.csv")).unwrap());
    let report = ok(&["report", "--dir", s(&r1)]);
    assert!(report.contains("4 cases"), "{report}");
    assert!(report.contains("sensitivity"));
}

#[test]
fn ablate_writes_one_report_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("train");
    let test = tmp.path().join("test");
    gen(&data, "8", "4");
    gen(&test, "4", "5");
    let out = tmp.path().join("ab");
    let stdout = ok(&[
        "ablate", "--data", s(&data), "--test", s(&test), "--variants", "full,labeled_only", "--seeds", "0,1", "--out", s(&out),
        "--iters", "10", "--width", "3", "--layers", "2",
    ]);
    assert!(stdout.contains("mean test DSC"), "{stdout}");
    for name in ["full_seed0", "full_seed1", "labeled_only_seed0", "labeled_only_seed1"] {
        assert!(out.join(name).join("summary.json").exists(), "{name}");
    }
    let scores: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(scores.as_array().unwrap().len(), 4);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seed", "1"]);
    let r: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert!(r["max_rel_error"].as_f64().unwrap() < 1e-4);
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(iag(&["train"]).status.code(), Some(1));
    assert_eq!(iag(&["bogus"]).status.code(), Some(1));
    assert_eq!(iag(&["train", "--data", "x", "--out", "y", "--variant", "nope"]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "4", "0");
    let bad_lr = iag(&["train", "--data", s(&data), "--out", s(&tmp.path().join("m")), "--lr", "-1"]);
    assert_eq!(bad_lr.status.code(), Some(1));
    assert_eq!(iag(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_and_format_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = iag(&["train", "--data", s(&tmp.path().join("none")), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(missing.status.code(), Some(2));
    let data = tmp.path().join("d");
    gen(&data, "4", "0");
    let junk = tmp.path().join("junk.iagm");
    std::fs::write(&junk, b"not a model").unwrap();
    let out = iag(&["eval", "--model", s(&junk), "--data", s(&data), "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}
