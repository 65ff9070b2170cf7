use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn kernel(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../../data/kernels/{name}.json"))
}

fn mpmdse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpmdse"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn adrs_of_identical_fronts_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let front = tmp.path().join("front.csv");
    fs::write(
        &front,
        "id,latency,max_util\na,100,0.5\nb,200,0.25\nc,400,0.1\n",
    )
    .unwrap();
    let out = mpmdse(&[
        "adrs",
        "--reference",
        s(&front),
        "--approx",
        s(&front),
        "--out",
        s(&tmp.path().join("r")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["adrs"], 0.0);
    assert!(tmp.path().join("r/adrs.json").is_file());
    assert!(tmp.path().join("r/resolved_config.json").is_file());
}

#[test]
fn adrs_rejects_non_numeric_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let front = tmp.path().join("front.csv");
    fs::write(&front, "id,latency\na,fast\n").unwrap();
    let out = mpmdse(&["adrs", "--reference", s(&front), "--approx", s(&front)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("row 2"), "{}", stderr(&out));
}

#[test]
fn unknown_config_keys_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"explore": {"budgett": 10}}"#).unwrap();
    let out = mpmdse(&[
        "explore",
        "--config",
        s(&cfg),
        "--kernel",
        s(&kernel("toy")),
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("budgett"), "{}", stderr(&out));
}

#[test]
fn budget_below_batch_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mpmdse(&[
        "explore",
        "--kernel",
        s(&kernel("toy")),
        "--budget",
        "3",
        "--out",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("batch size 5"), "{}", stderr(&out));
}

#[test]
fn missing_inputs_are_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.json");
    let out = mpmdse(&["explore", "--kernel", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("nope.json"), "{}", stderr(&out));
    let out = mpmdse(&["train", "--out", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--dataset"), "{}", stderr(&out));
    let out = mpmdse(&["eval", "--model", s(tmp.path())]);
    assert_eq!(code(&out), 2);
    let out = mpmdse(&["explore", "--kernel", s(&kernel("toy"))]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--out"), "{}", stderr(&out));
}

#[test]
fn replay_against_another_run_is_a_backend_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t.json");
    let out = mpmdse(&[
        "explore",
        "--kernel",
        s(&kernel("toy")),
        "--budget",
        "10",
        "--record",
        s(&t),
        "--out",
        s(&tmp.path().join("a")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    // a different seed changes the prompts after the first round
    let partial = tmp.path().join("b");
    let out = mpmdse(&[
        "explore",
        "--kernel",
        s(&kernel("gemm")),
        "--backend",
        "replay",
        "--transcript",
        s(&t),
        "--budget",
        "10",
        "--out",
        s(&partial),
    ]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(partial.join("summary.json").is_file());
    assert!(partial.join("archive.csv").is_file());
}

#[test]
fn replay_twice_gives_identical_archives() {
    let tmp = tempfile::tempdir().unwrap();
    let t = tmp.path().join("t.json");
    let gemm = kernel("gemm");
    let run = |dir: &str, extra: &[&str]| {
        let out_dir = tmp.path().join(dir);
        let mut args = vec![
            "explore",
            "--kernel",
            s(&gemm),
            "--budget",
            "30",
            "--seed",
            "4",
            "--out",
            s(&out_dir),
        ];
        args.extend(extra);
        let out = mpmdse(&args);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        fs::read(out_dir.join("archive.csv")).unwrap()
    };
    let live = run("live", &["--record", s(&t)]);
    let a = run("a", &["--backend", "replay", "--transcript", s(&t)]);
    let b = run("b", &["--backend", "replay", "--transcript", s(&t)]);
    assert_eq!(a, b);
    assert_eq!(live, a);
}

#[test]
fn all_infeasible_space_exits_with_four() {
    let tmp = tempfile::tempdir().unwrap();
    let mut doc: serde_json::Value =
        serde_json::from_slice(&fs::read(kernel("toy")).unwrap()).unwrap();
    doc["oracle"]["capacities"] = serde_json::json!({"lut": 1001, "dsp": 4, "ff": 1501, "bram": 3});
    let k = tmp.path().join("tiny.json");
    fs::write(&k, serde_json::to_string(&doc).unwrap()).unwrap();
    let out = mpmdse(&[
        "explore",
        "--kernel",
        s(&k),
        "--strategy",
        "random",
        "--budget",
        "10",
        "--no-reference",
        "--out",
        s(&tmp.path().join("e")),
    ]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(tmp.path().join("e/evaluated.csv").is_file());
}

#[test]
fn baselines_run_from_the_cli() {
    let tmp = tempfile::tempdir().unwrap();
    for strategy in ["random", "sa"] {
        let dir = tmp.path().join(strategy);
        let out = mpmdse(&[
            "explore",
            "--kernel",
            s(&kernel("toy")),
            "--strategy",
            strategy,
            "--budget",
            "12",
            "--out",
            s(&dir),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let evaluated = fs::read_to_string(dir.join("evaluated.csv")).unwrap();
        assert_eq!(evaluated.lines().count(), 13);
        let summary: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["strategy"], strategy);
    }
}

#[test]
fn train_eval_report_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let out = mpmdse(&[
        "gen-data",
        "--kernel",
        s(&kernel("toy")),
        "--samples",
        "20",
        "--text-dim",
        "32",
        "--out",
        s(&root.join("data")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let out = mpmdse(&[
        "train",
        "--dataset",
        s(&root.join("data")),
        "--epochs",
        "5",
        "--hidden",
        "16",
        "--variant",
        "graph-only",
        "--out",
        s(&root.join("train")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in [
        "checkpoint.bin",
        "metrics.csv",
        "normalizer.json",
        "split.json",
        "resolved_config.json",
    ] {
        assert!(root.join("train").join(f).is_file(), "{f}");
    }
    let metrics = fs::read_to_string(root.join("train/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 6);

    let out = mpmdse(&[
        "eval",
        "--model",
        s(&root.join("train")),
        "--split",
        "all",
        "--out",
        s(&root.join("eval")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = fs::read_to_string(root.join("eval/eval.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("metric,Latency,LUT,DSP,FF,BRAM,All"));
    let rmse: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .skip(1)
        .map(|v| v.parse().unwrap())
        .collect();
    let sum: f64 = rmse[..5].iter().sum();
    assert!((sum - rmse[5]).abs() < 1e-3, "{rmse:?}");
    let preds = fs::read_to_string(root.join("eval/predictions.csv")).unwrap();
    assert_eq!(preds.lines().count(), 21);

    let out = mpmdse(&[
        "explore",
        "--kernel",
        s(&kernel("toy")),
        "--evaluator",
        "mpm",
        "--model",
        s(&root.join("train")),
        "--budget",
        "10",
        "--out",
        s(&root.join("explore")),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(root.join("explore/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["evaluator"], "mpm");
    assert!(summary["oracle_adrs"].is_number());

    let out = mpmdse(&["report", "--run", s(root)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let report = fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(report.starts_with("source,metric,value\n"));
    assert!(report.contains("train/metrics.csv,epochs,5"), "{report}");
    assert!(report.contains("eval/eval.csv,rmse_all,"), "{report}");
    assert!(
        report.contains("explore/summary.json,evaluations,10"),
        "{report}"
    );
}

#[test]
fn flags_override_the_config_and_the_snapshot_records_them() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    fs::write(&cfg, r#"{"seed": 1, "explore": {"budget": 50, "k": 4}}"#).unwrap();
    let dir = tmp.path().join("e");
    let out = mpmdse(&[
        "explore",
        "--config",
        s(&cfg),
        "--kernel",
        s(&kernel("toy")),
        "--budget",
        "10",
        "--seed",
        "9",
        "--out",
        s(&dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let resolved: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.join("resolved_config.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 9);
    assert_eq!(resolved["explore"]["budget"], 10);
    assert_eq!(resolved["explore"]["k"], 4);
    // the snapshot is itself a valid run document
    let again = tmp.path().join("again");
    let out = mpmdse(&[
        "explore",
        "--config",
        s(&dir.join("resolved_config.json")),
        "--out",
        s(&again),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(dir.join("archive.csv")).unwrap(),
        fs::read(again.join("archive.csv")).unwrap()
    );
}
