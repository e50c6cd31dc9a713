use std::path::Path;
use std::process::{Command, Output};

use ssn_core::datamodel::load_store;
use ssn_core::retrieval::{evaluate, EvalOptions};
use ssn_core::trainer::train;
use ssn_core::{Checkpoint, RecallReport, TrainConfig};

fn ssn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssn"))
        .args(args)
        .env_remove("CI")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

/// Exit status and a single `error[kind]` line on stderr.
fn fails(o: Output, code: i32, kind: &str) {
    assert_eq!(o.status.code(), Some(code), "stderr: {}", stderr(&o));
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{kind}]: ")), "{err}");
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small fixture: synth with a reduced generator config.
fn fixture(dir: &Path) {
    let sc = dir.join("synth.json");
    std::fs::write(&sc, r#"{"n_items": 120, "slots": 3, "n_triplets": 48}"#).unwrap();
    ok(ssn(&["synth", "--out-dir", s(dir), "--synth-config", s(&sc), "--n-train", "32", "--seed", "7"]));
}

const TRAIN: &[&str] = &["--epochs", "2", "--batch-size", "8", "--lr", "1e-3", "--heads", "2", "--seed", "3"];

fn train_cli(dir: &Path) {
    let mut args = vec!["train", "--train-data"];
    let data = dir.join("train.ssnf");
    args.push(s(&data));
    args.extend(["--out-dir", s(dir)]);
    args.extend(TRAIN);
    ok(ssn(&args));
}

fn eval_cli(dir: &Path, out: &Path) -> RecallReport {
    let data = dir.join("test.ssnf");
    let ckpt = dir.join("checkpoint.ssnc");
    ok(ssn(&["eval", "--checkpoint", s(&ckpt), "--eval-data", s(&data), "--out-dir", s(out), "--seed", "0"]));
    RecallReport::from_json(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap()
}

#[test]
fn help_documents_config_keys() {
    let o = ok(ssn(&["--help"]));
    for key in ["lr_decay_every", "exclude_reference", "heatmap_upscale", "[5e-5]"] {
        assert!(stdout(&o).contains(key), "{key}");
    }
}

#[test]
fn train_then_eval_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    train_cli(dir.path());
    let csv = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,step,L_c,L_k,total,lr\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let report = eval_cli(dir.path(), &dir.path().join("e1"));
    assert_eq!(report.recall_at.keys().copied().collect::<Vec<_>>(), [1, 5, 10, 50]);
    assert_eq!(report.subset_recall_at.keys().copied().collect::<Vec<_>>(), [1, 2, 3]);
    assert!(report.mean_recall.is_some());

    let train_store = load_store(dir.path().join("train.ssnf")).unwrap();
    let test_store = load_store(dir.path().join("test.ssnf")).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        lr: 1e-3,
        heads: 2,
        seed: 3,
        ..TrainConfig::default()
    };
    let in_process = train(&train_store, cfg).unwrap();
    let saved = Checkpoint::load(dir.path().join("checkpoint.ssnc")).unwrap();
    assert_eq!(in_process, saved);
    let (direct, _) = evaluate(&test_store, &in_process.params, &EvalOptions::default()).unwrap();
    assert_eq!(direct, report);
}

#[test]
fn resume_continues_to_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let data = dir.path().join("train.ssnf");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let base = ["--train-data", s(&data), "--batch-size", "8", "--heads", "2", "--seed", "1"];
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--out-dir", s(out)];
        args.extend(base);
        args.extend(extra);
        ok(ssn(&args));
    };
    run(&a, &["--epochs", "2"]);
    run(&b, &["--epochs", "1"]);
    let first = b.join("checkpoint.ssnc");
    let moved = dir.path().join("first.ssnc");
    std::fs::rename(&first, &moved).unwrap();
    run(&b, &["--epochs", "2", "--resume", s(&moved)]);
    assert_eq!(
        std::fs::read(a.join("checkpoint.ssnc")).unwrap(),
        std::fs::read(b.join("checkpoint.ssnc")).unwrap()
    );
}

#[test]
fn untrained_eval_is_reproducible_and_weak() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let data = dir.path().join("train.ssnf");
    ok(ssn(&["train", "--train-data", s(&data), "--out-dir", s(dir.path()), "--epochs", "0", "--batch-size", "8", "--heads", "2", "--seed", "7"]));
    let a = eval_cli(dir.path(), &dir.path().join("a"));
    let b = eval_cli(dir.path(), &dir.path().join("b"));
    assert_eq!(a, b);
    assert_eq!(
        std::fs::read(dir.path().join("a/report.json")).unwrap(),
        std::fs::read(dir.path().join("b/report.json")).unwrap()
    );
    assert!(a.recall_at[&1] <= 20.0, "{}", a.recall_at[&1]);
}

#[test]
fn query_and_heatmap_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    train_cli(dir.path());
    let test = load_store(dir.path().join("test.ssnf")).unwrap();
    let t = &test.triplets()[0];
    let (r, x) = (t.reference_id.to_string(), t.text_id.to_string());
    let data = dir.path().join("test.ssnf");
    let o = ok(ssn(&["query", "--eval-data", s(&data), "--out-dir", s(dir.path()), "--reference", &r, "--text", &x, "--top-k", "4", "--seed", "0"]));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("1\t"));

    let hm = dir.path().join("hm");
    let ckpt = dir.path().join("checkpoint.ssnc");
    ok(ssn(&["heatmap", "--checkpoint", s(&ckpt), "--eval-data", s(&data), "--out-dir", s(&hm), "--queries", &x, "--upscale", "2", "--seed", "0"]));
    let pgm = std::fs::read(hm.join(format!("{x}_cr.pgm"))).unwrap();
    let (w, h, px) = ssn_core::heatmap::decode_pgm(&pgm).unwrap();
    assert_eq!((w, h, px.len()), (14, 2, 28));
}

#[test]
fn gradcheck_passes_in_f64() {
    let o = ok(ssn(&["gradcheck", "--precision", "f64", "--seed", "0"]));
    let out = stdout(&o);
    let last = out.lines().last().unwrap();
    let worst: f64 = last.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(worst <= 1e-5, "{last}");
    fails(ssn(&["gradcheck", "--precision", "f32", "--seed", "0"]), 2, "argument");
}

#[test]
fn malformed_inputs_give_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learnign_rate": 2}"#).unwrap();
    fails(ssn(&["train", "--config", s(&cfg), "--seed", "0"]), 2, "config");
    fails(ssn(&["train", "--no-such-flag"]), 2, "argument");
    fails(ssn(&["train", "--seed", "0"]), 2, "config");
    fails(ssn(&["train", "--train-data", "/nonexistent.ssnf", "--seed", "0"]), 3, "io");

    let junk = dir.path().join("junk.ssnf");
    std::fs::write(&junk, b"SSNFjunk").unwrap();
    fails(ssn(&["train", "--train-data", s(&junk), "--seed", "0"]), 3, "format");
    let ckpt = dir.path().join("junk.ssnc");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    fails(ssn(&["eval", "--checkpoint", s(&ckpt), "--eval-data", s(&junk), "--seed", "0"]), 3, "checkpoint");

    let o = Command::new(env!("CARGO_BIN_EXE_ssn"))
        .args(["gradcheck"])
        .env("CI", "1")
        .output()
        .unwrap();
    fails(o, 2, "config");
}

#[test]
fn divergent_training_exits_with_numeric_status() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let data = dir.path().join("train.ssnf");
    let o = ssn(&["train", "--train-data", s(&data), "--out-dir", s(dir.path()), "--epochs", "3", "--batch-size", "8", "--lr", "1e30", "--heads", "2", "--seed", "0"]);
    fails(o, 4, "numeric");
}
