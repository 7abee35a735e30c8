use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use liftnet::linalg::{Matrix, Vector};
use liftnet::network::{save_weights, ActivationSpec, Layer, NetworkParams};

fn liftnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liftnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// 1-3-1 ReLU network and a 12-point regression table.
fn fixture(dir: &Path) {
    let p = NetworkParams::new(
        ActivationSpec::relu(),
        vec![
            Layer::new(
                Matrix::from_rows(&[vec![1.0], vec![-0.5], vec![2.0]]).unwrap(),
                Vector::from(vec![0.1, 0.3, -0.2]),
            ),
            Layer::new(
                Matrix::from_rows(&[vec![0.7, -1.2, 0.4]]).unwrap(),
                Vector::from(vec![0.05]),
            ),
        ],
        None,
    )
    .unwrap();
    save_weights(&p, &dir.join("shallow.json")).unwrap();
    let mut csv = String::from("x,y\n");
    for i in 0..12 {
        let x = -1.0 + i as f64 / 5.5;
        csv += &format!("{x},{}\n", (2.0 * x).sin());
    }
    fs::write(dir.join("data.csv"), csv).unwrap();
    fs::write(
        dir.join("plan.json"),
        r#"{"insert_after": 1, "inserted_width": 1}"#,
    )
    .unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn lift_writes_weights_and_record_and_verifies() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let out = dir.path().join("out");
    let (plan, shallow, data) = (
        dir.path().join("plan.json"),
        dir.path().join("shallow.json"),
        dir.path().join("data.csv"),
    );
    let args = [
        "lift",
        "--config",
        s(&plan),
        "--weights",
        s(&shallow),
        "--data",
        s(&data),
        "-o",
        s(&out),
    ];
    let o = liftnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("overall=true"));
    let weights = fs::read(out.join("weights.json")).unwrap();
    let record = fs::read_to_string(out.join("lift_record.json")).unwrap();
    assert!(record.contains("\"overall\": true"));

    // second run refuses to overwrite, then reproduces the same bytes
    let again = liftnet(&args);
    assert_eq!(again.status.code(), Some(1));
    assert!(stderr(&again).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    assert!(liftnet(&forced).status.success());
    assert_eq!(fs::read(out.join("weights.json")).unwrap(), weights);

    let v = liftnet(&[
        "verify",
        "--source",
        s(&dir.path().join("shallow.json")),
        "--config",
        s(&out.join("lift_record.json")),
        "--weights",
        s(&out.join("weights.json")),
        "--data",
        s(&dir.path().join("data.csv")),
    ]);
    assert!(v.status.success(), "{}", stderr(&v));
    assert!(stdout(&v).contains("overall=true"));

    // the lifted layer is linear on the data, so merging recovers the widths
    let merged = dir.path().join("merged");
    let m = liftnet(&[
        "merge",
        "--weights",
        s(&out.join("weights.json")),
        "--data",
        s(&dir.path().join("data.csv")),
        "-o",
        s(&merged),
    ]);
    assert!(m.status.success(), "{}", stderr(&m));
    let rep = fs::read_to_string(merged.join("merge_report.json")).unwrap();
    let rep: serde_json::Value = serde_json::from_str(&rep).unwrap();
    assert_eq!(rep["final_widths"], serde_json::json!([1, 3, 1]));
}

#[test]
fn analysis_commands_print_and_report() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let w = dir.path().join("shallow.json");
    let d = dir.path().join("data.csv");
    let rep = dir.path().join("rep");
    let o = liftnet(&["mpc", "--weights", s(&w), "--data", s(&d), "-o", s(&rep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("layer  mpc"));
    assert!(rep.join("mpc_report.json").exists());

    let o = liftnet(&[
        "hessian",
        "--weights",
        s(&w),
        "--data",
        s(&d),
        "--tau",
        "1e-10",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("10 parameters"));

    let o = liftnet(&[
        "criticality",
        "--weights",
        s(&w),
        "--data",
        s(&d),
        "--tol",
        "1e-4",
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("critical=false"));

    // agreement needs classifiers
    let o = liftnet(&[
        "agreement",
        "--weights",
        s(&w),
        "--other",
        s(&w),
        "--data",
        s(&d),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_weights_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let missing = dir.path().join("nope.json");
    let o = liftnet(&[
        "mpc",
        "--weights",
        s(&missing),
        "--data",
        s(&dir.path().join("data.csv")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(s(&missing)));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = liftnet(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));
}

fn write_config(dir: &Path, lr: f64, procedure: &str) -> std::path::PathBuf {
    let cfg = format!(
        r#"{{"name": "small", "seed": 4,
            "architecture": {{"widths": [1, 6, 6, 1], "activation": {{"kind": "tanh"}}}},
            "init": {{"variance": 0.1}},
            "dataset": {{"kind": "synthetic_1d", "n": 20}},
            "optimizer": {{"learning_rate": {lr}, "epochs": 50, "mpc_every": 10}},
            "procedure": {procedure}}}"#
    );
    let path = dir.join("cfg.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn experiment_bundles_are_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0.05, r#"{"kind": "train"}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = liftnet(&[
            "experiment",
            "--config",
            s(&cfg),
            "--seeds",
            "1,2",
            "-o",
            s(out),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for seed in ["seed-1", "seed-2"] {
        for f in ["weights.json", "trainlog.csv", "reports/summary.json"] {
            let x = fs::read(a.join(seed).join(f)).unwrap();
            assert_eq!(x, fs::read(b.join(seed).join(f)).unwrap(), "{seed}/{f}");
        }
    }
    assert_ne!(
        fs::read(a.join("seed-1/weights.json")).unwrap(),
        fs::read(a.join("seed-2/weights.json")).unwrap()
    );
    let head = fs::read_to_string(a.join("seed-1/trainlog.csv")).unwrap();
    assert!(head.starts_with("epoch,loss,accuracy,grad_l1\n"));
}

#[test]
fn divergence_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1e6, r#"{"kind": "train"}"#);
    let out = dir.path().join("out");
    let o = liftnet(&["train", "--config", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let err = fs::read_to_string(out.join("reports/error.json")).unwrap();
    assert!(err.contains("\"stage\": \"train\""));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), -1.0, r#"{"kind": "train"}"#);
    let o = liftnet(&["train", "--config", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning rate"));
}
