use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

fn certilabel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_certilabel"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn grad_check_passes() {
    let out = certilabel(&["grad-check", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8(out.stdout).unwrap();
    let last = stdout.lines().last().unwrap();
    let err: f64 = last.rsplit(' ').next().unwrap().parse().unwrap();
    assert!(err < 1e-5, "{stdout}");
}

#[test]
fn simulate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("c.json");
    std::fs::write(&config, r#"{"scenes": 150, "pipeline": {"k": 16}}"#).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let out = certilabel(&["simulate", "--config", p(&config), "--seed", "7", "--threads", threads, "--out", p(dir)]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let fa = files(&a);
    assert!(fa.contains_key("report.json") && fa.contains_key("dataset.json"));
    // config.json records the thread count, which is the only expected difference.
    let strip = |mut m: BTreeMap<String, Vec<u8>>| {
        m.remove("config.json");
        m
    };
    assert_eq!(strip(fa), strip(files(&b)));
}

#[test]
fn zero_exponents_disable_dynamic_thresholds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = certilabel(&[
        "simulate", "--scenes", "200", "--seed", "3", "--out", p(tmp.path()),
        "--override", "gamma1=0", "--override", "gamma2=0",
    ]);
    assert_eq!(out.status.code(), Some(0));
    let f = files(tmp.path());
    assert_eq!(f["pseudo_certainty.json"], f["pseudo_fixed_threshold.json"]);
    assert_eq!(f["pseudo_classification_only.json"], f["pseudo_baseline.json"]);
}

#[test]
fn evaluate_empty_detections_gives_zero_ap() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert!(certilabel(&["simulate", "--scenes", "20", "--out", p(&sim)]).status.success());
    let empty = tmp.path().join("empty.json");
    std::fs::write(&empty, "[]").unwrap();
    let eval = tmp.path().join("eval");
    let out = certilabel(&["evaluate", "--dataset", p(&sim.join("dataset.json")), "--detections", p(&empty), "--out", p(&eval)]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ap_coco"], 0.0);
    assert_eq!(report["ap50"], 0.0);
}

#[test]
fn pseudo_label_round_trip_leaves_inputs_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim");
    assert!(certilabel(&["simulate", "--scenes", "50", "--out", p(&sim)]).status.success());
    let before = files(&sim);
    let dets = sim.join("pseudo_baseline.json");
    let out_dir = tmp.path().join("labels");
    let out = certilabel(&["pseudo-label", "--dataset", p(&sim.join("dataset.json")), "--detections", p(&dets), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(before, files(&sim));
    let labels: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(out_dir.join("pseudo_labels.json")).unwrap()).unwrap();
    let inputs: Vec<serde_json::Value> = serde_json::from_slice(&before["pseudo_baseline.json"]).unwrap();
    assert!(labels.len() <= inputs.len());
    assert!(out_dir.join("balance.json").exists());

    let report_dir = tmp.path().join("rendered");
    let out = certilabel(&["report", "--input", p(&sim.join("report.json")), "--out", p(&report_dir)]);
    assert_eq!(out.status.code(), Some(0));
    let curve = std::fs::read_to_string(report_dir.join("quality_curve.csv")).unwrap();
    assert!(curve.starts_with("series,iou_threshold,precision,recall\n"));
}

#[test]
fn exit_codes() {
    assert_eq!(certilabel(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(certilabel(&[]).status.code(), Some(1));
    let tmp = tempfile::tempdir().unwrap();
    let out = certilabel(&["simulate", "--out", p(tmp.path()), "--override", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    let out = certilabel(&["simulate", "--out", p(tmp.path()), "--override", "tau=2"]);
    assert_eq!(out.status.code(), Some(1));
    let missing = tmp.path().join("missing.json");
    let out = certilabel(&["evaluate", "--dataset", p(&missing), "--detections", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"images": [], "annotations": [], "categories": [{"id": 1, "name": "a"}]}"#).unwrap();
    let dets = tmp.path().join("dets.json");
    std::fs::write(&dets, r#"[{"image_id": 5, "category_id": 1, "bbox": [0, 0, 1, 1], "score": 0.5}]"#).unwrap();
    let out = certilabel(&["evaluate", "--dataset", p(&bad), "--detections", p(&dets), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}
