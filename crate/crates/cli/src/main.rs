//! Single-binary CLI binding the engine's modules into a usable tool.
//!
//! Every command is deterministic given (config, seed, fixtures); randomized
//! commands record their seed in the output metadata.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use ragproxy_core::agent::{Question, Document};
use ragproxy_core::credit::{assign_credit, disassemble, write_replay_jsonl};
use ragproxy_core::env::{
    EnvironmentBackends, ExactMatchJudge, InMemoryRetriever, LiveLlm, LiveRetriever, LlmJudge,
    RetryPolicy, ScriptedLlm,
};
use ragproxy_core::orchestrator::{run_inference, InferenceTrace, Strategy, TRACE_SCHEMA_VERSION};
use ragproxy_core::ppo::{collect_warmup, PpoConfig, ToySoftmaxPolicy};
use ragproxy_core::rollout::{build_tree, RolloutConfig, RolloutTree, TREE_SCHEMA_VERSION};
use ragproxy_core::simenv::{
    export_world, generate_world, run_ablation, train_arm, write_report_csv,
    CreditMode, TrainConfig, WorldConfig, WorldQuestion,
};

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum BackendMode {
    Fixtures,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum JudgeMode {
    Exact,
    Llm,
}

/// Top-level engine configuration, loadable from TOML. Unknown keys are
/// rejected so typos never silently fall back to defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EngineConfig {
    rollout: RolloutConfig,
    ppo: PpoConfig,
    train: TrainConfig,
    world: WorldConfig,
    backend: BackendMode,
    judge: JudgeMode,
    /// Fixture paths (fixtures backend).
    corpus_path: Option<PathBuf>,
    llm_fixtures_path: Option<PathBuf>,
    /// Live endpoints (live backend).
    retriever_url: Option<String>,
    llm_url: Option<String>,
    llm_model: String,
    llm_max_tokens: usize,
    out_dir: PathBuf,
    seed: Option<u64>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            rollout: RolloutConfig::default(),
            ppo: PpoConfig::default(),
            train: TrainConfig::default(),
            world: WorldConfig::default(),
            backend: BackendMode::Fixtures,
            judge: JudgeMode::Exact,
            corpus_path: None,
            llm_fixtures_path: None,
            retriever_url: None,
            llm_url: None,
            llm_model: "proxy".into(),
            llm_max_tokens: 256,
            out_dir: PathBuf::from("."),
            seed: None,
        }
    }
}

// ---------------------------------------------------------------------------
// command line

#[derive(Debug, Parser)]
#[command(name = "ragproxy", about = "Proxy-mediated RAG engine", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendMode>,
    #[arg(long, global = true)]
    retriever_url: Option<String>,
    #[arg(long, global = true)]
    llm_url: Option<String>,
    #[arg(long, global = true, value_enum)]
    judge: Option<JudgeMode>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Emit machine-readable error JSON on stderr.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct QuestionInput {
    /// Inline question text.
    #[arg(long)]
    question: Option<String>,
    /// Gold answer for the inline question (optional).
    #[arg(long)]
    gold: Vec<String>,
    /// JSONL file of questions.
    #[arg(long)]
    questions: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world and export its fixtures.
    GenWorld,
    /// Answer questions; optionally write trace files.
    Infer {
        #[command(flatten)]
        input: QuestionInput,
        /// Write one trace JSON per question into the output directory.
        #[arg(long)]
        trace_out: bool,
    },
    /// Build reward-labeled rollout trees and write them as JSON.
    Rollout {
        #[command(flatten)]
        input: QuestionInput,
    },
    /// Annotate a stored tree with credit and export replay records.
    Credit {
        /// Tree JSON file produced by `rollout`.
        #[arg(long)]
        tree: PathBuf,
        /// Replay JSONL output path.
        #[arg(long)]
        replay_out: Option<PathBuf>,
    },
    /// Train the toy policy on the synthetic world.
    TrainToy {
        #[arg(long, value_enum, default_value = "tree")]
        mode: TrainMode,
    },
    /// Rejection-sample successful paths into a warm-up corpus.
    CollectWarmup {
        #[command(flatten)]
        input: QuestionInput,
        #[arg(long, default_value_t = 4)]
        max_solutions: usize,
        #[arg(long, default_value_t = 6)]
        attempts: usize,
    },
    /// Score a predictions file against gold answers.
    Eval {
        /// JSONL of {"id": ..., "answer": ...} records.
        #[arg(long)]
        predictions: PathBuf,
        /// JSONL file of questions carrying gold answers.
        #[arg(long)]
        questions: PathBuf,
    },
    /// Aggregate strategy ratios and depth histograms from trace files.
    DumpStats {
        /// Trace JSON files.
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrainMode {
    Tree,
    Broadcast,
    Ablation,
}

// ---------------------------------------------------------------------------
// errors

#[derive(Debug)]
enum CliError {
    /// Bad usage, config, or input files: exit code 1.
    Usage(String),
    /// Backend (retriever/LLM/judge) failure: exit code 2.
    Backend(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Backend(_) => 2,
        }
    }
    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Backend(_) => "backend",
        }
    }
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Backend(m) => m,
        }
    }
}

impl From<ragproxy_core::orchestrator::OrchestratorError> for CliError {
    fn from(e: ragproxy_core::orchestrator::OrchestratorError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<ragproxy_core::env::EnvError> for CliError {
    fn from(e: ragproxy_core::env::EnvError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

// ---------------------------------------------------------------------------
// helpers

fn load_config(cli: &Cli) -> Result<EngineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| usage(format!("bad config: {e}")))?
        }
        None => EngineConfig::default(),
    };
    // flags win over the config file
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(backend) = cli.backend {
        cfg.backend = backend;
    }
    if let Some(url) = &cli.retriever_url {
        cfg.retriever_url = Some(url.clone());
    }
    if let Some(url) = &cli.llm_url {
        cfg.llm_url = Some(url.clone());
    }
    if let Some(judge) = cli.judge {
        cfg.judge = judge;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn effective_seed(cfg: &EngineConfig) -> u64 {
    cfg.seed.unwrap_or(0)
}

fn read_jsonl_questions(path: &Path) -> Result<Vec<Question>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| usage(format!("cannot open questions {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // accept either world questions or bare questions
        let q = serde_json::from_str::<WorldQuestion>(&line)
            .map(|wq| wq.question)
            .or_else(|_| serde_json::from_str::<Question>(&line))
            .map_err(|e| usage(format!("{}:{}: bad question record: {e}", path.display(), i + 1)))?;
        out.push(q);
    }
    if out.is_empty() {
        return Err(usage(format!("{} contains no questions", path.display())));
    }
    Ok(out)
}

fn gather_questions(input: &QuestionInput) -> Result<Vec<Question>, CliError> {
    match (&input.question, &input.questions) {
        (Some(text), None) => {
            let mut q = Question::new("cli-0", text.clone());
            for g in &input.gold {
                q = q.with_gold(g.clone());
            }
            Ok(vec![q])
        }
        (None, Some(path)) => read_jsonl_questions(path),
        _ => Err(usage("provide exactly one of --question or --questions")),
    }
}

fn backends(cfg: &EngineConfig) -> Result<EnvironmentBackends, CliError> {
    match cfg.backend {
        BackendMode::Fixtures => {
            let corpus_path = cfg
                .corpus_path
                .as_ref()
                .ok_or_else(|| usage("fixtures backend requires corpus_path"))?;
            let llm_path = cfg
                .llm_fixtures_path
                .as_ref()
                .ok_or_else(|| usage("fixtures backend requires llm_fixtures_path"))?;
            let corpus_file = fs::File::open(corpus_path).map_err(|e| {
                CliError::Backend(format!("retriever corpus {}: {e}", corpus_path.display()))
            })?;
            let mut corpus = Vec::new();
            for line in BufReader::new(corpus_file).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let doc: Document = serde_json::from_str(&line)
                    .map_err(|e| CliError::Backend(format!("bad corpus record: {e}")))?;
                corpus.push(doc);
            }
            let llm_json = fs::read_to_string(llm_path)
                .map_err(|e| CliError::Backend(format!("llm fixtures {}: {e}", llm_path.display())))?;
            let llm = Arc::new(ScriptedLlm::from_json(&llm_json)?);
            let judge: Arc<dyn ragproxy_core::env::JudgeBackend> = match cfg.judge {
                JudgeMode::Exact => Arc::new(ExactMatchJudge),
                JudgeMode::Llm => Arc::new(LlmJudge { llm: llm.clone() }),
            };
            Ok(EnvironmentBackends {
                retriever: Arc::new(InMemoryRetriever::new(corpus)),
                llm,
                judge,
            })
        }
        BackendMode::Live => {
            let retriever_url = cfg
                .retriever_url
                .as_ref()
                .ok_or_else(|| usage("live backend requires --retriever-url"))?;
            let llm_url = cfg
                .llm_url
                .as_ref()
                .ok_or_else(|| usage("live backend requires --llm-url"))?;
            let retry = RetryPolicy::default();
            let llm = Arc::new(LiveLlm::new(
                llm_url.clone(),
                cfg.llm_model.clone(),
                cfg.llm_max_tokens,
                retry.clone(),
            )?);
            let judge: Arc<dyn ragproxy_core::env::JudgeBackend> = match cfg.judge {
                JudgeMode::Exact => Arc::new(ExactMatchJudge),
                JudgeMode::Llm => Arc::new(LlmJudge { llm: llm.clone() }),
            };
            Ok(EnvironmentBackends {
                retriever: Arc::new(LiveRetriever::new(retriever_url.clone(), retry)?),
                llm,
                judge,
            })
        }
    }
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, bytes)?;
    Ok(path)
}

// ---------------------------------------------------------------------------
// commands

fn cmd_gen_world(cfg: &EngineConfig) -> Result<(), CliError> {
    let mut world_cfg = cfg.world.clone();
    if let Some(seed) = cfg.seed {
        world_cfg.seed = seed;
    }
    let world = generate_world(&world_cfg);
    let mut corpus = Vec::new();
    let mut fixtures = Vec::new();
    export_world(&world, &mut corpus, &mut fixtures)?;
    let mut questions = Vec::new();
    for wq in &world.questions {
        serde_json::to_writer(&mut questions, wq).map_err(usage)?;
        questions.push(b'\n');
    }
    let meta = serde_json::json!({
        "schema_version": 1,
        "seed": world_cfg.seed,
        "n_entities": world_cfg.n_entities,
        "n_distractors": world_cfg.n_distractors,
        "questions": world.questions.len(),
        "documents": world.corpus.len(),
    });
    write_out(&cfg.out_dir, "corpus.jsonl", &corpus)?;
    write_out(&cfg.out_dir, "llm_fixtures.json", &fixtures)?;
    write_out(&cfg.out_dir, "questions.jsonl", &questions)?;
    write_out(
        &cfg.out_dir,
        "world_meta.json",
        format!("{}\n", serde_json::to_string_pretty(&meta).map_err(usage)?).as_bytes(),
    )?;
    println!(
        "world seed {} written to {}",
        world_cfg.seed,
        cfg.out_dir.display()
    );
    Ok(())
}

fn cmd_infer(cfg: &EngineConfig, input: &QuestionInput, trace_out: bool) -> Result<(), CliError> {
    let env = backends(cfg)?;
    let policy = ToySoftmaxPolicy::default();
    let questions = gather_questions(input)?;
    let mut rollout = cfg.rollout.clone();
    rollout.seed = effective_seed(cfg);
    for (i, q) in questions.iter().enumerate() {
        let (answer, trace) = run_inference(q, &env, &policy, &rollout)?;
        println!("{answer}");
        if trace_out {
            let bytes = format!(
                "{}\n",
                serde_json::to_string_pretty(&trace).map_err(usage)?
            );
            write_out(&cfg.out_dir, &format!("trace_{i:03}.json"), bytes.as_bytes())?;
        }
    }
    Ok(())
}

fn cmd_rollout(cfg: &EngineConfig, input: &QuestionInput) -> Result<(), CliError> {
    let env = backends(cfg)?;
    let policy = ToySoftmaxPolicy::default();
    let questions = gather_questions(input)?;
    let mut rollout = cfg.rollout.clone();
    rollout.seed = effective_seed(cfg);
    for (i, q) in questions.iter().enumerate() {
        if q.gold_answers.is_empty() {
            return Err(usage(format!(
                "question {:?} has no gold answers; rollouts need reward labels",
                q.id
            )));
        }
        let tree = build_tree(q, &policy, &env, &rollout)?;
        let bytes = format!("{}\n", serde_json::to_string_pretty(&tree).map_err(usage)?);
        let path = write_out(&cfg.out_dir, &format!("tree_{i:03}.json"), bytes.as_bytes())?;
        println!(
            "{}: {} nodes, seed {}",
            path.display(),
            tree.nodes.len(),
            rollout.seed
        );
    }
    Ok(())
}

fn cmd_credit(cfg: &EngineConfig, tree_path: &Path, replay_out: Option<&Path>) -> Result<(), CliError> {
    let text = fs::read_to_string(tree_path)
        .map_err(|e| usage(format!("cannot read tree {}: {e}", tree_path.display())))?;
    let tree: RolloutTree = serde_json::from_str(&text).map_err(|e| usage(format!("bad tree: {e}")))?;
    if tree.schema_version != TREE_SCHEMA_VERSION {
        return Err(usage(format!(
            "tree schema version {} does not match supported version {}",
            tree.schema_version, TREE_SCHEMA_VERSION
        )));
    }
    let credits = assign_credit(&tree);
    println!(
        "root credit {:.6} over {} leaves ({} nodes)",
        credits[0].credit,
        credits[0].leaf_count,
        tree.nodes.len()
    );
    let records = disassemble(&tree, &credits);
    let out_path = match replay_out {
        Some(p) => p.to_path_buf(),
        None => cfg.out_dir.join("replay.jsonl"),
    };
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    write_replay_jsonl(&records, &mut buf).map_err(|e| usage(format!("replay export: {e}")))?;
    fs::write(&out_path, &buf)?;
    println!("{} replay records -> {}", records.len(), out_path.display());
    Ok(())
}

fn cmd_train_toy(cfg: &EngineConfig, mode: TrainMode) -> Result<(), CliError> {
    let mut world_cfg = cfg.world.clone();
    let seed = effective_seed(cfg);
    world_cfg.seed = seed;
    let world = generate_world(&world_cfg);
    let mut train = cfg.train.clone();
    train.seed = seed;
    match mode {
        TrainMode::Tree | TrainMode::Broadcast => {
            let credit_mode = if mode == TrainMode::Tree {
                CreditMode::Tree
            } else {
                CreditMode::Broadcast
            };
            let outcome = train_arm(&world, credit_mode, &train)?;
            let bytes = format!(
                "{}\n",
                serde_json::to_string_pretty(&outcome).map_err(usage)?
            );
            let path = write_out(&cfg.out_dir, "train_metrics.json", bytes.as_bytes())?;
            let f = outcome.final_eval;
            println!(
                "seed {seed} final: closed {:.3} single {:.3} two-hop {:.3} -> {}",
                f.closed_book,
                f.single_fact,
                f.two_hop,
                path.display()
            );
        }
        TrainMode::Ablation => {
            let report = run_ablation(&world, &train, &[seed])?;
            let mut csv = Vec::new();
            write_report_csv(&report, &mut csv)?;
            write_out(&cfg.out_dir, "ablation_curves.csv", &csv)?;
            let bytes = format!(
                "{}\n",
                serde_json::to_string_pretty(&report).map_err(usage)?
            );
            let path = write_out(&cfg.out_dir, "ablation_summary.json", bytes.as_bytes())?;
            println!(
                "seed {seed} two-hop: tree {:.3} broadcast {:.3} -> {}",
                report.tree_mean.two_hop,
                report.broadcast_mean.two_hop,
                path.display()
            );
        }
    }
    Ok(())
}

fn cmd_collect_warmup(
    cfg: &EngineConfig,
    input: &QuestionInput,
    max_solutions: usize,
    attempts: usize,
) -> Result<(), CliError> {
    let env = backends(cfg)?;
    let policy = ToySoftmaxPolicy::default();
    let questions = gather_questions(input)?;
    let mut rollout = cfg.rollout.clone();
    rollout.seed = effective_seed(cfg);
    let solutions = collect_warmup(&questions, &policy, &env, &rollout, max_solutions, attempts)?;
    let mut buf = Vec::new();
    let meta = serde_json::json!({
        "schema_version": 1,
        "seed": rollout.seed,
        "max_solutions": max_solutions,
        "attempts": attempts,
    });
    serde_json::to_writer(&mut buf, &meta).map_err(usage)?;
    buf.push(b'\n');
    for s in &solutions {
        serde_json::to_writer(&mut buf, s).map_err(usage)?;
        buf.push(b'\n');
    }
    let path = write_out(&cfg.out_dir, "warmup.jsonl", &buf)?;
    println!("{} solutions -> {}", solutions.len(), path.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PredictionRecord {
    id: String,
    answer: String,
}

fn cmd_eval(predictions: &Path, questions: &Path) -> Result<(), CliError> {
    let qs = read_jsonl_questions(questions)?;
    let by_id: BTreeMap<&str, &Question> = qs.iter().map(|q| (q.id.as_str(), q)).collect();
    let file = fs::File::open(predictions)
        .map_err(|e| usage(format!("cannot open predictions {}: {e}", predictions.display())))?;
    let judge = ExactMatchJudge;
    let mut correct = 0usize;
    let mut total = 0usize;
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: PredictionRecord =
            serde_json::from_str(&line).map_err(|e| usage(format!("bad prediction record: {e}")))?;
        let q = by_id
            .get(p.id.as_str())
            .ok_or_else(|| usage(format!("prediction for unknown question id {:?}", p.id)))?;
        use ragproxy_core::env::JudgeBackend;
        if judge.judge(q, &p.answer)?.is_success() {
            correct += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(usage("no predictions to score"));
    }
    println!("accuracy {:.1}", 100.0 * correct as f64 / total as f64);
    Ok(())
}

fn cmd_dump_stats(traces: &[PathBuf]) -> Result<(), CliError> {
    let mut strategy_counts: BTreeMap<&'static str, usize> = BTreeMap::new();
    for key in ["DirectAnswer", "SinglePass", "MultiStep"] {
        strategy_counts.insert(key, 0);
    }
    let mut depth_histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut total = 0usize;
    for path in traces {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read trace {}: {e}", path.display())))?;
        let trace: InferenceTrace =
            serde_json::from_str(&text).map_err(|e| usage(format!("bad trace {}: {e}", path.display())))?;
        if trace.schema_version != TRACE_SCHEMA_VERSION {
            return Err(usage(format!(
                "trace schema version {} does not match supported version {}",
                trace.schema_version, TRACE_SCHEMA_VERSION
            )));
        }
        let key = match trace.strategy {
            Some(Strategy::DirectAnswer) => "DirectAnswer",
            Some(Strategy::SinglePass) => "SinglePass",
            Some(Strategy::MultiStep) => "MultiStep",
            None => continue,
        };
        *strategy_counts.get_mut(key).unwrap() += 1;
        *depth_histogram.entry(trace.steps.len()).or_insert(0) += 1;
        total += 1;
    }
    if total == 0 {
        return Err(usage("no usable traces"));
    }
    let ratio: BTreeMap<&str, f64> = strategy_counts
        .iter()
        .map(|(k, v)| (*k, *v as f64 / total as f64))
        .collect();
    let out = serde_json::json!({
        "schema_version": 1,
        "traces": total,
        "strategy_ratio": ratio,
        "depth_histogram": depth_histogram,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(usage)?);
    Ok(())
}

// ---------------------------------------------------------------------------

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenWorld => cmd_gen_world(&cfg),
        Command::Infer { input, trace_out } => cmd_infer(&cfg, input, *trace_out),
        Command::Rollout { input } => cmd_rollout(&cfg, input),
        Command::Credit { tree, replay_out } => cmd_credit(&cfg, tree, replay_out.as_deref()),
        Command::TrainToy { mode } => cmd_train_toy(&cfg, *mode),
        Command::CollectWarmup {
            input,
            max_solutions,
            attempts,
        } => cmd_collect_warmup(&cfg, input, *max_solutions, *attempts),
        Command::Eval {
            predictions,
            questions,
        } => cmd_eval(predictions, questions),
        Command::DumpStats { traces } => cmd_dump_stats(traces),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                let payload = serde_json::json!({
                    "error": e.message(),
                    "kind": e.kind(),
                });
                let _ = writeln!(std::io::stderr(), "{payload}");
            } else {
                eprintln!("error: {}", e.message());
            }
            ExitCode::from(e.code())
        }
    }
}
