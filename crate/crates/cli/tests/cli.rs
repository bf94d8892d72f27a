use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use shnn::model::{init_params, Arch, Checkpoint};

fn shnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shnn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_dataset(dir: &Path, extra: &[&str]) {
    let d = dir.to_str().unwrap();
    let mut args = vec![
        "--out-dir",
        d,
        "gen-data",
        "--system",
        "double_well",
        "--n-train",
        "32",
        "--n-val",
        "8",
        "--n-steps",
        "40",
        "--dt",
        "0.01",
    ];
    args.extend_from_slice(extra);
    let out = shnn(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

const QUICK_TRAIN: [&str; 8] = [
    "--batch-size",
    "16",
    "--tau",
    "3",
    "--stride",
    "4",
    "--hidden",
    "8,8",
];

fn train_in(dir: &Path, epochs: &str, extra: &[&str]) -> Output {
    let mut args = vec![
        "--out-dir",
        dir.to_str().unwrap(),
        "train",
        "--epochs",
        epochs,
    ];
    args.extend_from_slice(&QUICK_TRAIN);
    args.extend_from_slice(extra);
    shnn(&args)
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    assert_eq!(code(&shnn(&["--help"])), 0);
    assert_eq!(code(&shnn(&["frobnicate"])), 1);
    assert_eq!(code(&shnn(&["train", "--epochs", "many"])), 1);
    assert_eq!(code(&shnn(&["check-tableau"])), 1);
}

#[test]
fn missing_dataset_is_reported_by_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nowhere");
    let out = shnn(&[
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "train",
        "--data",
        missing.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nowhere"), "{}", stderr(&out));
}

#[test]
fn unknown_system_and_bad_config_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let out = shnn(&["--out-dir", d, "gen-data", "--system", "pendulum"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("pendulum"));

    let cfg = tmp.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"taus": 2}}"#).unwrap();
    let out = shnn(&["--config", cfg.to_str().unwrap(), "--out-dir", d, "train"]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("taus"));
}

#[test]
fn failed_gradient_check_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let ok = shnn(&["--out-dir", d, "grad-check", "--hidden", "4", "--tau", "2"]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(tmp.path().join("grad_check.csv").exists());
    let strict = shnn(&[
        "--out-dir",
        d,
        "grad-check",
        "--hidden",
        "4",
        "--tau",
        "2",
        "--tol",
        "0",
    ]);
    assert_eq!(code(&strict), 2);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), &[]);
    let out = train_in(tmp.path(), "0", &["--seed", "7"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ckpt = Checkpoint::load(&tmp.path().join("checkpoint.json")).unwrap();
    let init = init_params(Arch::with_hidden(1, &[8, 8]).unwrap().widths(), 7).unwrap();
    assert_eq!(ckpt.params().unwrap().values(), init.values());
}

#[test]
fn pipeline_is_reproducible_and_stays_in_out_dir() {
    let root = tempfile::tempdir().unwrap();
    let mut eval_json = Vec::new();
    let mut payloads = Vec::new();
    for (run, threads) in [("a", "1"), ("b", "3")] {
        let dir = root.path().join(run);
        small_dataset(&dir, &["--threads", threads]);
        let out = train_in(&dir, "2", &["--threads", threads]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let out = shnn(&["--out-dir", dir.to_str().unwrap(), "eval", "--grid-n", "9"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        payloads.push(fs::read(dir.join("checkpoint.f64")).unwrap());
        eval_json.push(fs::read_to_string(dir.join("eval.json")).unwrap());
        for f in [
            "metrics.csv",
            "grid.csv",
            "report.csv",
            "report.md",
            "manifest.json",
        ] {
            assert!(dir.join(f).exists(), "missing {f}");
        }
    }
    assert_eq!(payloads[0], payloads[1]);
    assert_eq!(eval_json[0], eval_json[1]);
    let mut entries: Vec<_> = fs::read_dir(root.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    entries.sort();
    assert_eq!(entries, ["a", "b"]);
}

#[test]
fn command_line_beats_config_file_beats_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"system": {"name": "coupled_ho", "params": {"alpha": 0.25}},
            "dataset": {"n_train": 12, "n_val": 4, "n_steps": 10, "noise_coeff": 0.0}}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("out");
    let out = shnn(&[
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
        "gen-data",
        "--n-val",
        "6",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["system"]["name"], "coupled_ho");
    assert_eq!(manifest["system"]["params"]["alpha"], 0.25);
    assert_eq!(manifest["n_train"], 12);
    assert_eq!(manifest["n_val"], 6);
    assert_eq!(manifest["n_steps"], 10);
    assert_eq!(manifest["dt"], 0.001);
}

#[test]
fn eval_rejects_a_checkpoint_of_the_wrong_dimension() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), &[]);
    let out = train_in(tmp.path(), "0", &[]);
    assert_eq!(code(&out), 0);
    let out = shnn(&[
        "--out-dir",
        tmp.path().to_str().unwrap(),
        "eval",
        "--system",
        "henon_heiles",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("d = 1"), "{}", stderr(&out));
}

#[test]
fn integrate_writes_a_trajectory() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().to_str().unwrap();
    let out = shnn(&[
        "--out-dir",
        d,
        "integrate",
        "--system",
        "double_well",
        "--steps",
        "20",
        "--h",
        "0.05",
        "--y0=-0.5,0.2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("trajectory.csv")).unwrap();
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "t,q1,p1");
    assert_eq!(lines.len(), 22);
    assert!(lines[1].starts_with("0,-5e-1,2e-1"), "{}", lines[1]);
}

#[test]
fn check_tableau_reads_files_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.json");
    fs::write(
        &path,
        r#"{"name": "euler", "a_q": [[0.0]], "b_q": [1.0], "c_q": [0.0],
            "a_p": [[0.0]], "b_p": [1.0], "c_p": [0.0]}"#,
    )
    .unwrap();
    let out = shnn(&["check-tableau", "--file", path.to_str().unwrap(), "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["symplectic"], false);
    assert_eq!(report["coupling"], 1.0);

    let out = shnn(&["check-tableau", "--name", "gauss2"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("symplectic yes"));
}
