use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use llavul::data::{write_jsonl, ConversationSample};
use llavul::synthetic::{overfit_corpus, summary_pairs};
use serde_json::{json, Value};
use tempfile::TempDir;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let qa: Vec<ConversationSample> = overfit_corpus().into_iter().take(12).collect();
        write_jsonl(&dir.path().join("pairs.jsonl"), &summary_pairs(16, 2)).unwrap();
        write_jsonl(&dir.path().join("qa.jsonl"), &qa).unwrap();
        let cfg = json!({
            "model": {"enc_dim": 16, "enc_layers": 2, "enc_heads": 2, "enc_positions": 256, "proj_hidden": 24,
                      "dec_dim": 16, "dec_layers": 2, "dec_heads": 2, "context": 384, "mlp_ratio": 2},
            "tokenizer": {"vocab_size": 300},
            "pretrain": {"lr": 0.001, "batch_size": 4, "max_steps": 4},
            "finetune": {"lr": 0.001, "batch_size": 4, "max_steps": 4},
            "decode": {"max_new_tokens": 8},
            "max_code_tokens": 200
        });
        std::fs::write(dir.path().join("cfg.json"), cfg.to_string()).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    /// Runs with the fixture config and `--out <dir>/<out>`.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_llavul"))
            .args(args)
            .args(["--config", &self.arg("cfg.json"), "--out", &self.arg(out)])
            .output()
            .unwrap()
    }

    fn pretrain(&self, out: &str, seed: &str) -> Output {
        self.run(out, &["pretrain", "--pairs", &self.arg("pairs.jsonl"), "--seed", seed])
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

fn error_kind(o: &Output) -> String {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let last = stderr.lines().last().unwrap_or_default();
    let v: Value = serde_json::from_str(last).unwrap_or_else(|_| panic!("not a JSON error line: {last}"));
    v["error"]["kind"].as_str().unwrap().to_string()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {}: {}", code(o), String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pretraining_is_seed_deterministic() {
    let f = Fixture::new();
    for (out, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        assert_ok(&f.pretrain(out, seed));
    }
    let losses = |d: &str| read_json(&f.path(d).join("pretrain_report.json"))["losses"].clone();
    assert_eq!(losses("a"), losses("b"));
    assert_ne!(losses("a"), losses("c"));
    let events = std::fs::read_to_string(f.path("a").join("events.jsonl")).unwrap();
    assert!(events.lines().any(|l| l.contains("\"event\":\"step\"")));
    let resolved = read_json(&f.path("a").join("resolved_config.json"));
    assert_eq!(resolved["command"], "pretrain");
    assert_eq!(resolved["config"]["seed"], 3);
    assert_eq!(resolved["config"]["pretrain"]["seed"], 3);
}

#[test]
fn finetune_without_pretraining_is_refused() {
    let f = Fixture::new();
    let o = f.run("ft", &["finetune", "--data", &f.arg("qa.jsonl"), "--split", "all"]);
    assert_eq!(code(&o), 5);
    assert_eq!(error_kind(&o), "stage_order");
}

#[test]
fn full_pipeline_and_inputs_untouched() {
    let f = Fixture::new();
    let before: Vec<Vec<u8>> = ["pairs.jsonl", "qa.jsonl", "cfg.json"].iter().map(|n| std::fs::read(f.path(n)).unwrap()).collect();
    assert_ok(&f.pretrain("pre", "1"));
    let ckpt = f.arg("pre/pretrain.ckpt");
    assert_ok(&f.run("fine", &["finetune", "--data", &f.arg("qa.jsonl"), "--split", "all", "--checkpoint", &ckpt]));
    let fine = f.arg("fine/finetune.ckpt");
    let o = f.run("eval", &["evaluate", "--checkpoint", &fine, "--data", &f.arg("qa.jsonl"), "--split", "all", "--rows"]);
    assert_ok(&o);
    let metrics = read_json(&f.path("eval/metrics.json"));
    assert!(metrics["bleu2"].is_number(), "{metrics}");
    assert_eq!(std::fs::read_to_string(f.path("eval/scores.jsonl")).unwrap().lines().count(), 12);

    std::fs::write(f.path("code.c"), "int f(char *s) { char b[4]; strcpy(b, s); }").unwrap();
    let o = f.run("gen", &["generate", "--checkpoint", &fine, "--code", &f.arg("code.c"), "--question", "What is wrong?"]);
    assert_ok(&o);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim_end().lines().count(), 1);

    let after: Vec<Vec<u8>> = ["pairs.jsonl", "qa.jsonl", "cfg.json"].iter().map(|n| std::fs::read(f.path(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn error_kinds_map_to_exit_codes() {
    let f = Fixture::new();
    let o = f.run("x", &["pretrain", "--bogus"]);
    assert_eq!(code(&o), 2);

    let o = f.run("x", &["evaluate", "--checkpoint", &f.arg("missing.ckpt"), "--data", &f.arg("qa.jsonl")]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (3, "missing_input"));

    std::fs::write(f.path("bad.jsonl"), "{\"id\": \"a\", \"code\": 3}\nnot json\n").unwrap();
    let o = f.run("x", &["finetune", "--from-scratch", "--data", &f.arg("bad.jsonl"), "--split", "all"]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (4, "schema"));

    let o = f.run("x", &["pretrain", "--pairs", &f.arg("pairs.jsonl"), "--set", "model.no_such_field=1"]);
    assert_eq!((code(&o), error_kind(&o).as_str()), (6, "config"));
}

#[test]
fn ablation_writes_one_row_per_variant() {
    let f = Fixture::new();
    let o = f.run(
        "abl",
        &["ablate", "--pairs", &f.arg("pairs.jsonl"), "--data", &f.arg("qa.jsonl"), "--train-split", "all", "--eval-split", "all"],
    );
    assert_ok(&o);
    let rows = read_json(&f.path("abl/ablation.json"));
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["full", "truncated_code:100", "only_pretraining"]);
    assert!(f.path("abl/truncated_code_100/metrics.json").exists());
}

#[test]
fn qagen_runs_offline_without_an_endpoint() {
    let f = Fixture::new();
    let records: String = (0..3)
        .map(|i| {
            json!({"id": format!("r{i}"), "language": "C", "code": "void f(char *s) { char b[8]; strcpy(b, s); }",
                   "description": "A stack buffer overflow in f allows remote attackers to execute code via a long string."})
                .to_string()
                + "\n"
        })
        .collect();
    std::fs::write(f.path("records.jsonl"), records).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_llavul"))
        .args(["qagen", "--records", &f.arg("records.jsonl"), "--out", &f.arg("qa_out")])
        .env("LLAVUL_OFFLINE", "1")
        .output()
        .unwrap();
    assert_ok(&o);
    let report = read_json(&f.path("qa_out/qagen_report.json"));
    assert_eq!(report["succeeded"], 3);
    assert_eq!(std::fs::read_to_string(f.path("qa_out/qa.jsonl")).unwrap().lines().count(), 3);
}
