use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

/// Small settings so the whole pipeline runs in seconds.
const FAST: &[&str] = &[
    "--set",
    "stpn.window_len=200",
    "--set",
    "stpn.stride=100",
    "--set",
    "rbm.epochs=5",
    "--set",
    "detection.rounds=200",
    "--set",
    "generator.test_len=2000",
    "--set",
    "generator.calibration_len=4000",
    "--set",
    "generator.heldout_runs=2",
    "--set",
    "a3.samples_per_vector=2",
    "--set",
    "a3.mlp.hidden=[16]",
    "--set",
    "a3.mlp.max_epochs=3",
    "--log-level",
    "warn",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stpn-rca"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).args(FAST).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_lists_every_subcommand() {
    let out = bin().arg("--help").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "gen", "extract", "train-rbm", "detect", "rca-s3", "a3-gen", "a3-train", "a3-infer", "var-fit", "var-rca", "eval",
        "repro-table1", "repro-table2",
    ] {
        assert!(text.contains(sub), "help is missing {sub}");
    }
}

#[test]
fn unknown_flags_and_bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("x");
    let unknown = bin().args(["gen", "--bogus", "--out", p(&out_dir)]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
    let bad_field = bin().args(["gen", "--set", "stpn.windw=3", "--out", p(&out_dir)]).output().unwrap();
    assert_eq!(bad_field.status.code(), Some(2));
    let bad_value = bin().args(["gen", "--set", "var.flag_fraction=2", "--out", p(&out_dir)]).output().unwrap();
    assert_eq!(bad_value.status.code(), Some(2));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, "{not json").unwrap();
    let bad_file = bin().args(["gen", "--config", p(&cfg), "--out", p(&out_dir)]).output().unwrap();
    assert_eq!(bad_file.status.code(), Some(2));
    assert!(!out_dir.exists());
}

#[test]
fn failed_command_leaves_no_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["gen", "--len", "300", "--out", p(&data)]);
    let fit = dir.path().join("fits/nominal.json");
    // Far more regressors than samples.
    let out = run(&["var-fit", "--data", p(&data), "--lag", "200", "--out", p(&fit)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!fit.exists() && !fit.parent().unwrap().exists());
    let missing = run(&["gen", "--suite", "node-delay", "--case", "node99", "--out", p(&dir.path().join("none"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!dir.path().join("none").exists());
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Workspace { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

#[test]
fn stepwise_pipeline_produces_every_artifact() {
    let w = Workspace::new();
    let (train, case) = (w.path("train"), w.path("node01"));
    ok(&["gen", "--mode", "0", "--len", "6000", "--out", p(&train)]);
    ok(&["gen", "--suite", "node-delay", "--case", "node01", "--out", p(&case)]);
    assert!(train.join("series.csv").exists() && train.join("meta.json").exists());
    let header = std::fs::read_to_string(train.join("series.csv")).unwrap();
    assert!(header.starts_with("t,x1,x2,x3,x4,x5\n"));
    assert_eq!(json(&case.join("meta.json"))["truth"]["fault_node"], 0);

    let (ftrain, fcase) = (w.path("train.features.json"), w.path("case.features.json"));
    ok(&["extract", "--fit", p(&train), "--data", p(&train), "--out", p(&ftrain)]);
    ok(&["extract", "--extractor", p(&ftrain), "--data", p(&case), "--out", p(&fcase)]);
    let features = json(&fcase);
    assert_eq!(features["windows"][0]["bits"].as_array().unwrap().len(), 25);
    assert_eq!(features["config"]["thresholds"].as_array().unwrap().len(), 25);

    let model = w.path("rbm.json");
    let calib = w.path("calib");
    let fcalib = w.path("calib.features.json");
    ok(&["gen", "--mode", "0", "--len", "4000", "--seed", "7", "--out", p(&calib)]);
    ok(&["extract", "--extractor", p(&ftrain), "--data", p(&calib), "--out", p(&fcalib)]);
    ok(&["train-rbm", "--features", p(&ftrain), "--calibration", p(&fcalib), "--out", p(&model)]);
    let m = json(&model);
    assert_eq!(m["n_visible"], 25);
    assert!(m["reference"]["F_tilde"].is_number() || m["reference"]["f_tilde"].is_number());

    let det = w.path("detect.json");
    let out = run(&["detect", "--model", p(&model), "--features", p(&fcase), "--out", p(&det)]);
    let flagged = json(&det)["anomalous"].as_bool().unwrap();
    assert_eq!(out.status.code(), Some(if flagged { 3 } else { 0 }));

    let (s3_batch, s3_windows) = (w.path("s3.json"), w.path("s3_windows.json"));
    ok(&["rca-s3", "--model", p(&model), "--features", p(&fcase), "--batch", "--out", p(&s3_batch)]);
    ok(&["rca-s3", "--model", p(&model), "--features", p(&fcase), "--out", p(&s3_windows)]);
    let r = json(&s3_batch);
    assert!(r["F_end"].as_f64().unwrap() <= r["F_start"].as_f64().unwrap());
    assert_eq!(
        json(&s3_windows).as_array().unwrap().len(),
        features["windows"].as_array().unwrap().len()
    );

    let (nom_fit, ano_fit, var_out) = (w.path("nom.fit.json"), w.path("ano.fit.json"), w.path("var.json"));
    ok(&["var-fit", "--data", p(&train), "--out", p(&nom_fit)]);
    ok(&["var-fit", "--data", p(&case), "--out", p(&ano_fit)]);
    ok(&["var-rca", "--nominal", p(&nom_fit), "--anomalous", p(&ano_fit), "--out", p(&var_out)]);
    let v = json(&var_out);
    assert_eq!(v["method"], "var");
    assert!(!v["flips"].as_array().unwrap().is_empty());

    let (corpus, mlp, pred) = (w.path("corpus.json"), w.path("mlp.json"), w.path("a3.json"));
    ok(&["a3-gen", "--features", p(&ftrain), "--out", p(&corpus)]);
    ok(&["a3-train", "--corpus", p(&corpus), "--out", p(&mlp)]);
    ok(&["a3-infer", "--model", p(&mlp), "--features", p(&fcase), "--out", p(&pred)]);
    assert_eq!(json(&corpus)["L"], 25);
    assert_eq!(json(&mlp)["layers"].as_array().unwrap().len(), 2);
    assert!(json(&pred).as_array().is_some());

    let report = w.path("eval");
    ok(&["eval", "--data", p(&case), p(&case), "--report", p(&s3_batch), p(&var_out), "--out", p(&report)]);
    let rep = json(&report.join("report.json"));
    let methods: Vec<&str> = rep["summaries"].as_array().unwrap().iter().map(|s| s["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["s3", "var"]);
    assert!(std::fs::read_to_string(report.join("report.txt")).unwrap().contains("eps"));
}

#[test]
fn repro_table2_is_byte_stable() {
    let w = Workspace::new();
    let (a, b) = (w.path("a"), w.path("b"));
    ok(&["repro-table2", "--dataset", "5node", "--set", "generator.train_len=8000", "--out", p(&a)]);
    ok(&["repro-table2", "--dataset", "5node", "--set", "generator.train_len=8000", "--jobs", "2", "--out", p(&b)]);
    let ra = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("report.json")).unwrap());
    assert_eq!(
        std::fs::read(a.join("report.txt")).unwrap(),
        std::fs::read(b.join("report.txt")).unwrap()
    );
    let report: Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["provenance"]["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["cases"].as_array().unwrap().len(), 5);
}

#[test]
fn bad_dataset_name_is_rejected() {
    let w = Workspace::new();
    let out = run(&["repro-table2", "--dataset", "7node", "--out", p(&w.path("r"))]);
    assert_eq!(out.status.code(), Some(2));
}
