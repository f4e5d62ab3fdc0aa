use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/toy").join(name)
}

fn e2el(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_e2el"))
        .args(args)
        .env("E2EL_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Common `--config` and path overrides pointing outputs into `dir`.
struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Run { dir: tempfile::tempdir().unwrap() }
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).display().to_string()
    }

    fn with_config<'a>(&self, extra: &[&'a str], owned: &'a mut Vec<String>) -> Vec<&'a str> {
        *owned = vec![
            fixture("config.json").display().to_string(),
            format!("paths.candidate_index={}", self.path("index.bin")),
            format!("paths.checkpoint={}", self.path("model.e2el")),
            format!("paths.train_log={}", self.path("log.jsonl")),
        ];
        let mut args = vec!["--config", owned[0].as_str()];
        for o in &owned[1..] {
            args.extend(["--set", o.as_str()]);
        }
        args.extend_from_slice(extra);
        args
    }

    fn cmd(&self, command: &str, extra: &[&str]) -> Output {
        let mut owned = Vec::new();
        let mut args = vec![command];
        args.extend(self.with_config(extra, &mut owned));
        e2el(&args)
    }

    fn build_and_train(&self, steps: Option<usize>) {
        let index = self.path("index.bin");
        ok(&self.cmd("build-candidates", &["--out", &index]));
        let cap = steps.map(|s| format!("train.max_steps={s}"));
        let extra: Vec<&str> = cap.iter().flat_map(|c| ["--set", c.as_str()]).collect();
        ok(&self.cmd("train", &extra));
    }
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn full_pipeline_overfits_the_toy_fixture() {
    let run = Run::new();
    let train = fixture("train.jsonl").display().to_string();
    let index = run.path("index.bin");
    let report = json(&ok(&run.cmd("build-candidates", &["--out", &index, "--recall", &train])));
    assert_eq!(report["recall"][0]["top_k"], 30);
    assert_eq!(report["recall"][0]["recall"], 1.0);

    let summary = json(&ok(&run.cmd("train", &[])));
    assert_eq!(summary["steps"], 1440);
    let log = std::fs::read_to_string(run.path("log.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(json).collect();
    assert_eq!(records.len(), 1440);
    assert_eq!(records[0]["step"], 1);
    assert!(records.iter().all(|r| r["loss"].as_f64().unwrap() >= 0.0));

    let ann = run.path("ann.jsonl");
    ok(&run.cmd("annotate", &["--in", &train, "--out", &ann]));
    let lines: Vec<Value> = std::fs::read_to_string(&ann).unwrap().lines().map(json).collect();
    let keys: Vec<(String, u64)> = lines
        .iter()
        .map(|a| (a["doc_id"].as_str().unwrap().to_string(), a["start"].as_u64().unwrap()))
        .collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);

    let eval = json(&ok(&e2el(&["evaluate", "--pred", &ann, "--gold", &train, "--mode", "strong"])));
    let f1 = eval["micro"]["f1"].as_f64().unwrap();
    assert!(f1 >= 0.95, "strong micro F1 {f1}");

    let table = ok(&e2el(&["evaluate", "--pred", &ann, "--gold", &train, "--mode", "weak", "--table"]));
    assert!(table.contains("weak") && table.contains("micro"));

    let choice = json(&ok(&run.cmd("select-threshold", &["--dev", &train, "--write"])));
    assert!(choice["micro_f1"].as_f64().unwrap() >= f1);

    let ed = run.path("ed.jsonl");
    ok(&run.cmd("annotate", &["--in", &train, "--out", &ed, "--task", "ed"]));
    let eval = json(&ok(&e2el(&["evaluate", "--pred", &ed, "--gold", &train, "--task", "ed"])));
    assert!(eval["micro"]["f1"].as_f64().unwrap() >= 0.95);
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let train = fixture("train.jsonl").display().to_string();
    let artifacts = |run: &Run| {
        run.build_and_train(Some(100));
        let ann = run.path("ann.jsonl");
        ok(&run.cmd("annotate", &["--in", &train, "--out", &ann, "--threshold", "-0.05"]));
        (
            std::fs::read(run.path("model.e2el")).unwrap(),
            std::fs::read(run.path("log.jsonl")).unwrap(),
            std::fs::read(ann).unwrap(),
        )
    };
    let (a, b) = (Run::new(), Run::new());
    let (x, y) = (artifacts(&a), artifacts(&b));
    assert!(!x.2.is_empty());
    assert!(x == y, "artifacts differ between identical runs");
}

#[test]
fn exit_codes() {
    let code = |out: Output| out.status.code().unwrap();
    // invalid invocations and inputs
    assert_eq!(code(e2el(&["no-such-command"])), 1);
    assert_eq!(code(e2el(&["train"])), 1);
    let cfg = fixture("config.json").display().to_string();
    assert_eq!(code(e2el(&["train", "--config", &cfg, "--set", "model.bogus=1"])), 1);
    assert_eq!(code(e2el(&["train", "--config", &cfg, "--set", "train.gamma=-1"])), 1);
    assert_eq!(code(e2el(&["train", "--config", "/no/such/config.json"])), 1);
    let train = fixture("train.jsonl").display().to_string();
    assert_eq!(code(e2el(&["evaluate", "--pred", "/no/such/ann.jsonl", "--gold", &train])), 1);

    let run = Run::new();
    let bad = run.path("bad.jsonl");
    std::fs::write(&bad, "{\"doc_id\": \"d\", \"tokens\": []}\n").unwrap();
    let out = e2el(&["evaluate", "--pred", &bad, "--gold", &bad]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1"), "error names the line");

    // failures while running
    run.build_and_train(Some(5));
    let out = run.cmd("annotate", &["--in", &train, "--out", "/no/such/dir/ann.jsonl"]);
    assert_eq!(code(out), 2);

    assert_eq!(code(e2el(&["--help"])), 0);
}

#[test]
fn gradient_check_command() {
    let run = Run::new();
    ok(&run.cmd("build-candidates", &[]));
    let out = ok(&run.cmd("grad-check", &["--coords", "6"]));
    let report = json(&out);
    assert!(report["max_rel_error"].as_f64().unwrap() <= 1e-4);
    assert!(report["params"].as_array().unwrap().iter().any(|p| p["param"] == "head.w_alpha"));
}

#[test]
fn conll_import_and_entity_training() {
    let run = Run::new();
    let conll = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/two_docs.conll");
    let out = run.path("docs.jsonl");
    ok(&e2el(&["import-conll", "--in", &conll.display().to_string(), "--out", &out]));
    let docs: Vec<Value> = std::fs::read_to_string(&out).unwrap().lines().map(json).collect();
    assert_eq!(docs.len(), 2);
    assert_eq!(docs[1]["gold"][1], serde_json::json!([3, 4, "European_Commission"]));

    let co = run.path("co.tsv");
    std::fs::write(&co, "E_a\tqtffq\t5\nE_a\twyjos\t1\nE_b\twyjos\t7\n").unwrap();
    let vecs = run.path("ents.txt");
    let mut owned = Vec::new();
    let mut args = vec!["train-entities"];
    args.extend(run.with_config(&["--set", "entities.dim=16", "--cooccurrence", &co, "--out", &vecs], &mut owned));
    ok(&e2el(&args));
    let text = std::fs::read_to_string(&vecs).unwrap();
    assert_eq!(text.lines().next(), Some("2 16"));
    for line in text.lines().skip(1) {
        let norm: f64 = line.split(' ').skip(1).map(|x| x.parse::<f64>().unwrap().powi(2)).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
