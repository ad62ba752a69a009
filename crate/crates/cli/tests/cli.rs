//! End-to-end tests driving the compiled binary the way a user would.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_ragproxy");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should run")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

/// Generates the synthetic world into `dir` and returns a config file path
/// wired to its fixtures.
fn gen_world(dir: &Path, seed: u64) -> String {
    let out = run(&["--out", dir.to_str().unwrap(), "--seed", &seed.to_string(), "gen-world"]);
    assert!(out.status.success(), "gen-world failed: {}", stderr(&out));
    let cfg_path = dir.join("engine.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "backend = \"fixtures\"\ncorpus_path = \"{0}/corpus.jsonl\"\nllm_fixtures_path = \"{0}/llm_fixtures.json\"\n",
            dir.display()
        ),
    )
    .unwrap();
    cfg_path.to_str().unwrap().to_string()
}

/// First single-fact question of the generated world, as (text, gold).
fn first_question(dir: &Path) -> (String, String) {
    let text = std::fs::read_to_string(dir.join("questions.jsonl")).unwrap();
    let wq: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    (
        wq["question"]["text"].as_str().unwrap().to_string(),
        wq["question"]["gold_answers"][0].as_str().unwrap().to_string(),
    )
}

#[test]
fn gen_world_writes_fixtures_and_records_seed() {
    let dir = tempfile::tempdir().unwrap();
    gen_world(dir.path(), 11);
    for name in ["corpus.jsonl", "llm_fixtures.json", "questions.jsonl", "world_meta.json"] {
        assert!(dir.path().join(name).exists(), "missing {name}");
    }
    let meta: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("world_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["seed"], 11);
    assert_eq!(meta["schema_version"], 1);
}

#[test]
fn infer_answers_and_dump_stats_aggregates_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_world(dir.path(), 5);
    let out = run(&[
        "--config", &cfg,
        "--out", dir.path().to_str().unwrap(),
        "--seed", "5",
        "infer",
        "--questions", dir.path().join("questions.jsonl").to_str().unwrap(),
        "--trace-out",
    ]);
    assert!(out.status.success(), "infer failed: {}", stderr(&out));
    let answer_text = stdout(&out);
    let answers: Vec<&str> = answer_text.lines().collect();
    assert!(!answers.is_empty());

    let traces: Vec<String> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            (name.starts_with("trace_") && name.ends_with(".json"))
                .then(|| p.to_str().unwrap().to_string())
        })
        .collect();
    assert_eq!(traces.len(), answers.len());

    let mut args = vec!["dump-stats"];
    args.extend(traces.iter().map(String::as_str));
    let out = run(&args);
    assert!(out.status.success(), "dump-stats failed: {}", stderr(&out));
    let stats: Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(stats["traces"], answers.len());
    let ratio = stats["strategy_ratio"].as_object().unwrap();
    let total: f64 = ratio.values().map(|v| v.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9, "ratios sum to {total}");
}

#[test]
fn credit_reports_root_credit_equal_to_mean_leaf_reward() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_world(dir.path(), 9);
    let (question, gold) = first_question(dir.path());
    let out = run(&[
        "--config", &cfg,
        "--out", dir.path().to_str().unwrap(),
        "--seed", "9",
        "rollout",
        "--question", &question,
        "--gold", &gold,
    ]);
    assert!(out.status.success(), "rollout failed: {}", stderr(&out));
    let tree_path = dir.path().join("tree_000.json");
    let tree: Value =
        serde_json::from_str(&std::fs::read_to_string(&tree_path).unwrap()).unwrap();
    assert_eq!(tree["schema_version"], 1);

    // independent expectation: mean reward over leaf nodes
    let mut rewards = Vec::new();
    for node in tree["nodes"].as_array().unwrap() {
        if let Some(r) = node["payload"]["Leaf"]["reward"].as_f64() {
            rewards.push(r);
        }
    }
    assert!(!rewards.is_empty());
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;

    let replay = dir.path().join("replay.jsonl");
    let out = run(&[
        "credit",
        "--tree", tree_path.to_str().unwrap(),
        "--replay-out", replay.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "credit failed: {}", stderr(&out));
    let line = stdout(&out);
    let printed: f64 = line
        .split_whitespace()
        .nth(2)
        .and_then(|t| t.parse().ok())
        .expect("root credit value in output");
    assert!((printed - mean).abs() < 1e-6, "printed {printed}, expected {mean}");
    assert!((line.contains(&format!("over {} leaves", rewards.len()))));
    assert!(replay.exists());
    let first = std::fs::read_to_string(&replay).unwrap();
    assert!(first.lines().count() > 0);
}

#[test]
fn eval_identity_predictions_scores_hundred() {
    let dir = tempfile::tempdir().unwrap();
    gen_world(dir.path(), 3);
    let questions = dir.path().join("questions.jsonl");
    let mut preds = String::new();
    for line in std::fs::read_to_string(&questions).unwrap().lines() {
        let wq: Value = serde_json::from_str(line).unwrap();
        let q = &wq["question"];
        preds.push_str(&format!(
            "{}\n",
            serde_json::json!({"id": q["id"], "answer": q["gold_answers"][0]})
        ));
    }
    let preds_path = dir.path().join("preds.jsonl");
    std::fs::write(&preds_path, preds).unwrap();
    let out = run(&[
        "eval",
        "--predictions", preds_path.to_str().unwrap(),
        "--questions", questions.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "eval failed: {}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "accuracy 100.0");
}

#[test]
fn collect_warmup_records_seed_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_world(dir.path(), 4);
    let out = run(&[
        "--config", &cfg,
        "--out", dir.path().to_str().unwrap(),
        "--seed", "42",
        "collect-warmup",
        "--questions", dir.path().join("questions.jsonl").to_str().unwrap(),
        "--max-solutions", "2",
        "--attempts", "3",
    ]);
    assert!(out.status.success(), "collect-warmup failed: {}", stderr(&out));
    let warmup = std::fs::read_to_string(dir.path().join("warmup.jsonl")).unwrap();
    let meta: Value = serde_json::from_str(warmup.lines().next().unwrap()).unwrap();
    assert_eq!(meta["seed"], 42);
    assert_eq!(meta["max_solutions"], 2);
    assert!(warmup.lines().count() > 1, "expected at least one solution");
}

#[test]
fn train_toy_tiny_budget_writes_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("tiny.toml");
    std::fs::write(
        &cfg_path,
        "[world]\nn_entities = 2\nn_distractors = 2\n\n[train]\nsteps = 2\nbatch_questions = 2\nwarmup_rounds = 1\nwarmup_attempts = 1\neval_every = 1\n",
    )
    .unwrap();
    let out = run(&[
        "--config", cfg_path.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(),
        "--seed", "1",
        "train-toy",
        "--mode", "tree",
    ]);
    assert!(out.status.success(), "train-toy failed: {}", stderr(&out));
    let metrics: Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("train_metrics.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(metrics["seed"], 1);
    assert_eq!(metrics["mode"], "Tree");
    assert!(metrics["curve"].as_array().unwrap().len() >= 2);
}

#[test]
fn unknown_config_key_is_rejected_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "not_a_real_key = 1\n").unwrap();
    let out = run(&["--config", cfg_path.to_str().unwrap(), "--json", "gen-world"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(&stderr(&out)).expect("stderr is JSON");
    assert_eq!(err["kind"], "usage");
    assert!(err["error"].as_str().unwrap().contains("not_a_real_key"));
}

#[test]
fn unknown_nested_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    std::fs::write(&cfg_path, "[rollout]\nmax_dept = 5\n").unwrap();
    let out = run(&["--config", cfg_path.to_str().unwrap(), "gen-world"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("max_dept"));
}

#[test]
fn live_backend_failure_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "--backend", "live",
        "--retriever-url", "http://127.0.0.1:1/search",
        "--llm-url", "http://127.0.0.1:1/chat",
        "--out", dir.path().to_str().unwrap(),
        "--json",
        "infer",
        "--question", "What is the capital of France?",
    ]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr(&out));
    let err: Value = serde_json::from_str(&stderr(&out)).expect("stderr is JSON");
    assert_eq!(err["kind"], "backend");
}

#[test]
fn schema_version_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gen_world(dir.path(), 9);
    let (question, gold) = first_question(dir.path());
    let out = run(&[
        "--config", &cfg,
        "--out", dir.path().to_str().unwrap(),
        "rollout",
        "--question", &question,
        "--gold", &gold,
    ]);
    assert!(out.status.success(), "rollout failed: {}", stderr(&out));
    let tree_path = dir.path().join("tree_000.json");
    let mut tree: Value =
        serde_json::from_str(&std::fs::read_to_string(&tree_path).unwrap()).unwrap();
    tree["schema_version"] = Value::from(99);
    std::fs::write(&tree_path, serde_json::to_string_pretty(&tree).unwrap()).unwrap();
    let out = run(&["credit", "--tree", tree_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("schema version"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("engine.toml");
    std::fs::write(&cfg_path, format!("seed = 1\nout_dir = \"{}\"\n", dir.path().display()))
        .unwrap();
    let out = run(&["--config", cfg_path.to_str().unwrap(), "--seed", "77", "gen-world"]);
    assert!(out.status.success(), "gen-world failed: {}", stderr(&out));
    let meta: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("world_meta.json")).unwrap())
            .unwrap();
    assert_eq!(meta["seed"], 77);
}
