use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "corpus_spec": {"groups": 3, "docs_per_group": 10, "months": 3, "docs_per_month": 6,
                  "neutral_docs": 40, "words_per_doc": 6, "filler_min": 4, "filler_max": 8},
  "model": {"d_model": 16, "n_heads": 2, "d_ffn": 32, "context_len": 64},
  "pretrain": {"steps": 10, "batch_size": 4},
  "adapter": {"train": {"epochs": 2}},
  "heldout": {"min_docs": 4},
  "retrieval": {"max_new_tokens": 8},
  "users": {"alice": ["cardiology"], "mallory": []}
}"#;

struct Env {
    dir: tempfile::TempDir,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("config.json"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_adapterswap"))
            .current_dir(self.dir.path())
            .arg("--config")
            .arg(self.path("config.json"))
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }

    /// Builds a complete registry from the tiny config.
    fn built() -> Self {
        let env = Self::new();
        for args in [&["gen-corpus"][..], &["ingest"], &["pretrain"], &["train-group", "all"], &["fit-retriever"]] {
            env.ok(args);
        }
        env
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn error_json(out: &Output) -> serde_json::Value {
    let line = String::from_utf8_lossy(&out.stderr);
    assert_eq!(line.trim().lines().count(), 1, "{line}");
    serde_json::from_str(line.trim()).unwrap()
}

fn first_doc(corpus: &Path, label: &str) -> String {
    let text = std::fs::read_to_string(corpus).unwrap();
    text.lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["label"] == label)
        .map(|v| v["doc_id"].as_str().unwrap().to_string())
        .unwrap()
}

#[test]
fn build_query_purge_and_audit() {
    let env = Env::built();
    let audit = env.ok(&["audit"]);
    assert!(audit.contains("0 violations"), "{audit}");
    assert!(audit.starts_with("config-hash "));

    let query = env.ok(&["query", "--user", "alice", "--k", "2", "the patient"]);
    assert!(query.contains("adapter cardiology-"), "{query}");
    assert!(query.contains("weight 1.000000"), "{query}");

    let denied = env.run(&["query", "--user", "mallory", "anything"]);
    assert_eq!(code(&denied), 3);
    assert_eq!(error_json(&denied)["error"], "access-denied");
    assert_eq!(code(&env.run(&["query", "--user", "eve", "x"])), 3);

    let doc = first_doc(&env.path("corpus.jsonl"), "cardiology");
    let complete = env.ok(&["complete", "--doc", &doc]);
    assert!(complete.contains("adapter perplexity"), "{complete}");

    env.ok(&["purge", "--doc", &doc]);
    let again = env.run(&["purge", "--doc", &doc]);
    assert_eq!(code(&again), 4);
    assert!(error_json(&again)["message"].as_str().unwrap().contains(&doc));
    assert!(env.ok(&["audit"]).contains("0 violations"));

    let ops = std::fs::read_to_string(env.path("registry/ops.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = ops.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let commands: Vec<&str> = records.iter().map(|r| r["command"].as_str().unwrap()).collect();
    assert_eq!(commands, ["ingest", "pretrain", "train-group", "fit-retriever", "purge", "purge"]);
    assert_eq!(records[4]["outcome"], "ok");
    assert!(records[5]["outcome"].as_str().unwrap().starts_with("error"));
    assert!(records.iter().all(|r| r["config_hash"].as_str().unwrap().len() == 64));
}

#[test]
fn tampering_fails_the_audit() {
    let env = Env::built();
    std::fs::write(env.path("registry/corpus/0000"), "stray").unwrap();
    let out = env.run(&["audit"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stdout).contains("1 violations"));
}

#[test]
fn usage_errors_exit_2() {
    let env = Env::new();
    let out = env.run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
    assert_eq!(error_json(&out)["error"], "usage");

    std::fs::write(env.path("bad.json"), r#"{"retrieval": {"topk": 3}}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_adapterswap"))
        .args(["--config", env.path("bad.json").to_str().unwrap(), "config"])
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(error_json(&out)["message"].as_str().unwrap().contains("topk"));
}

#[test]
fn missing_registry_exits_4() {
    let env = Env::new();
    let out = env.run(&["audit"]);
    assert_eq!(code(&out), 4);
}

#[test]
fn config_reflects_flags_and_seed() {
    let env = Env::new();
    let text = env.ok(&["--seed", "5", "--registry", "elsewhere", "config"]);
    let cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg["corpus_spec"]["seed"], 5);
    assert_eq!(cfg["model"]["init_seed"], 5);
    assert_eq!(cfg["paths"]["registry"], "elsewhere");
    assert_eq!(cfg["model"]["d_model"], 16);
}
