//! Fully synthetic question-answering environment: a generated entity/fact
//! corpus, scripted answering and judging backends, and the closed-loop
//! training and ablation harness built on top of them.
//!
//! The world is built so that each question kind demands a different
//! strategy: motto questions are answerable without evidence, signature
//! color questions need one retrieval, and partner-color questions can only
//! be solved by chaining two retrievals, because the partner's name appears
//! nowhere except inside the bridging fact document.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{Document, Question};
use crate::credit::{assign_credit, disassemble, ReplayRecord};
use crate::env::{
    AnswerRule, EnvironmentBackends, ExactMatchJudge, InMemoryRetriever, QuestionFixture,
    Retriever, ScriptedLlm,
};
use crate::orchestrator::{run_inference, OrchestratorError};
use crate::policy::Policy;
use crate::ppo::{
    bc_step, collect_warmup, normalize_advantages, prepare_batch, train_step, PpoConfig,
    ToySoftmaxPolicy, ToyValue,
};
use crate::rollout::{build_tree, sample_trajectory, RolloutConfig};

// ---------------------------------------------------------------------------
// world generation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    /// Number of entities; rounded down to an even count for pairing.
    pub n_entities: usize,
    pub n_distractors: usize,
    pub top_k: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            n_entities: 16,
            n_distractors: 12,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuestionKind {
    ClosedBook,
    SingleFact,
    TwoHop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldQuestion {
    pub question: Question,
    pub kind: QuestionKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub config: WorldConfig,
    pub corpus: Vec<Document>,
    pub questions: Vec<WorldQuestion>,
    pub fixtures: BTreeMap<String, QuestionFixture>,
}

const FIRST_NAMES: [&str; 20] = [
    "Auren", "Belra", "Coral", "Doven", "Elmi", "Farel", "Gilda", "Harno", "Ilka", "Joru",
    "Kessa", "Lovan", "Mirel", "Norva", "Odell", "Pruna", "Quilla", "Rosta", "Selda", "Tovin",
];
const LAST_NAMES: [&str; 20] = [
    "Brell", "Cormo", "Drast", "Evane", "Fenwick", "Garno", "Hollis", "Ivret", "Jaspern",
    "Kline", "Lumet", "Marsh", "Novak", "Ostrel", "Pierce", "Quent", "Rusk", "Sorel", "Tane",
    "Vint",
];
const COLORS: [&str; 12] = [
    "crimson", "teal", "amber", "violet", "olive", "indigo", "maroon", "turquoise", "saffron",
    "charcoal", "magenta", "cobalt",
];
const MOTTO_WORDS: [&str; 10] = [
    "bold", "patient", "curious", "steadfast", "nimble", "quiet", "daring", "careful",
    "generous", "stubborn",
];

fn single_fact_question(name: &str) -> String {
    format!("What is the signature color of {name}?")
}

fn two_hop_question(name: &str) -> String {
    format!("What is the signature color of the registered partner of {name}?")
}

fn closed_book_question(name: &str) -> String {
    format!("What is the motto of {name}?")
}

fn color_doc_id(idx: usize) -> String {
    format!("color-{idx:03}")
}

fn partner_doc_id(idx: usize) -> String {
    format!("partner-{idx:03}")
}

/// Generates the corpus, questions, and scripted-LLM fixtures. Two-hop
/// questions are kept only when the chained queries can recover both
/// required documents and the question itself, used as a single query,
/// cannot (no lexical shortcut).
pub fn generate_world(cfg: &WorldConfig) -> SyntheticWorld {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = (cfg.n_entities.max(2) / 2) * 2;
    assert!(n <= FIRST_NAMES.len(), "at most {} entities", FIRST_NAMES.len());

    let mut firsts: Vec<&str> = FIRST_NAMES.to_vec();
    firsts.shuffle(&mut rng);
    let mut lasts: Vec<&str> = LAST_NAMES.to_vec();
    lasts.shuffle(&mut rng);
    let names: Vec<String> = (0..n)
        .map(|i| format!("{} {}", firsts[i], lasts[i]))
        .collect();
    let colors: Vec<&str> = (0..n).map(|i| COLORS[(i + rng.gen_range(0..3)) % COLORS.len()]).collect();
    let mottos: Vec<String> = (0..n)
        .map(|_| {
            format!(
                "Fortune favors the {}",
                MOTTO_WORDS[rng.gen_range(0..MOTTO_WORDS.len())]
            )
        })
        .collect();

    // pair consecutive entities; the even index gets the partner fact
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let mut corpus = Vec::new();
    for i in 0..n {
        corpus.push(Document {
            doc_id: color_doc_id(i),
            title: format!("Signature color of {}", names[i]),
            body: format!("The signature color of {} is {}.", names[i], colors[i]),
            origin_query: String::new(),
        });
    }
    let mut partners: Vec<(usize, usize)> = Vec::new();
    for pair in order.chunks(2) {
        let (a, b) = (pair[0], pair[1]);
        partners.push((a, b));
        corpus.push(Document {
            doc_id: partner_doc_id(a),
            title: format!("Registered partner of {}", names[a]),
            body: format!("The registered partner of {} is {}.", names[a], names[b]),
            origin_query: String::new(),
        });
    }
    for j in 0..cfg.n_distractors {
        corpus.push(Document {
            doc_id: format!("misc-{j:03}"),
            title: format!("Archive bulletin {j}"),
            body: format!(
                "Bulletin {j} lists the district schedule, market hours, and weather notes."
            ),
            origin_query: String::new(),
        });
    }

    let retriever = InMemoryRetriever::new(corpus.clone());
    let contains = |query: &str, id: &str| -> bool {
        retriever
            .retrieve(query, cfg.top_k)
            .map(|docs| docs.iter().any(|d| d.doc_id == id))
            .unwrap_or(false)
    };

    let mut questions = Vec::new();
    let mut fixtures = BTreeMap::new();
    for i in 0..n {
        // single-fact: solvable with the question as the query
        let text = single_fact_question(&names[i]);
        debug_assert!(contains(&text, &color_doc_id(i)));
        questions.push(WorldQuestion {
            question: Question::new(format!("single-{i:03}"), &text).with_gold(colors[i]),
            kind: QuestionKind::SingleFact,
        });
        fixtures.insert(
            text.clone(),
            QuestionFixture {
                closed_book_answer: None,
                roadmap: Some(format!("Step 1: signature color of {}", names[i])),
                rules: vec![AnswerRule {
                    required_doc_ids: vec![color_doc_id(i)],
                    answer: colors[i].to_string(),
                }],
                wrong_answer: Some("unknown".into()),
            },
        );

        // closed-book: the scripted model already knows the motto
        let text = closed_book_question(&names[i]);
        questions.push(WorldQuestion {
            question: Question::new(format!("closed-{i:03}"), &text).with_gold(mottos[i].clone()),
            kind: QuestionKind::ClosedBook,
        });
        fixtures.insert(
            text.clone(),
            QuestionFixture {
                closed_book_answer: Some(mottos[i].clone()),
                roadmap: Some(format!("Step 1: motto of {}", names[i])),
                rules: Vec::new(),
                wrong_answer: None,
            },
        );
    }
    for &(a, b) in &partners {
        let text = two_hop_question(&names[a]);
        let hop1 = format!("registered partner of {}", names[a]);
        let hop2 = format!("signature color of {}", names[b]);
        let chain_ok = contains(&hop1, &partner_doc_id(a)) && contains(&hop2, &color_doc_id(b));
        let shortcut = contains(&text, &partner_doc_id(a)) && contains(&text, &color_doc_id(b));
        if !chain_ok || shortcut {
            continue;
        }
        questions.push(WorldQuestion {
            question: Question::new(format!("twohop-{a:03}"), &text).with_gold(colors[b]),
            kind: QuestionKind::TwoHop,
        });
        fixtures.insert(
            text.clone(),
            QuestionFixture {
                closed_book_answer: None,
                roadmap: Some(format!(
                    "Step 1: registered partner of {}\nStep 2: signature color of the partner found in step one",
                    names[a]
                )),
                rules: vec![AnswerRule {
                    required_doc_ids: vec![partner_doc_id(a), color_doc_id(b)],
                    answer: colors[b].to_string(),
                }],
                wrong_answer: Some("unknown".into()),
            },
        );
    }

    SyntheticWorld {
        config: cfg.clone(),
        corpus,
        questions,
        fixtures,
    }
}

/// In-process backends over the world: lexical retriever, scripted LLM,
/// exact-match judge.
pub fn make_backends(world: &SyntheticWorld) -> EnvironmentBackends {
    EnvironmentBackends {
        retriever: Arc::new(InMemoryRetriever::new(world.corpus.clone())),
        llm: Arc::new(ScriptedLlm {
            fixtures: world.fixtures.clone(),
            completions: BTreeMap::new(),
        }),
        judge: Arc::new(ExactMatchJudge),
    }
}

/// Writes the corpus as JSON-lines documents plus the fixtures as one JSON
/// object, the on-disk form the CLI consumes.
pub fn export_world(
    world: &SyntheticWorld,
    corpus_out: &mut dyn Write,
    fixtures_out: &mut dyn Write,
) -> std::io::Result<()> {
    for doc in &world.corpus {
        serde_json::to_writer(&mut *corpus_out, doc)?;
        corpus_out.write_all(b"\n")?;
    }
    let llm = ScriptedLlm {
        fixtures: world.fixtures.clone(),
        completions: BTreeMap::new(),
    };
    serde_json::to_writer_pretty(fixtures_out, &llm)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub closed_book: f64,
    pub single_fact: f64,
    pub two_hop: f64,
}

impl EvalPoint {
    pub fn overall(&self) -> f64 {
        (self.closed_book + self.single_fact + self.two_hop) / 3.0
    }
}

/// Greedy accuracy per question kind under the deterministic inference
/// procedure.
pub fn evaluate(
    world: &SyntheticWorld,
    policy: &dyn Policy,
    env: &EnvironmentBackends,
    rollout_cfg: &RolloutConfig,
    step: usize,
) -> Result<EvalPoint, OrchestratorError> {
    let mut totals: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for wq in &world.questions {
        let (answer, _) = run_inference(&wq.question, env, policy, rollout_cfg)?;
        let reward = env.judge.judge(&wq.question, &answer)?;
        let key = match wq.kind {
            QuestionKind::ClosedBook => "closed",
            QuestionKind::SingleFact => "single",
            QuestionKind::TwoHop => "twohop",
        };
        let e = totals.entry(key).or_insert((0.0, 0.0));
        e.0 += reward.0;
        e.1 += 1.0;
    }
    let acc = |k: &str| {
        totals
            .get(k)
            .map(|(s, n)| if *n > 0.0 { s / n } else { 0.0 })
            .unwrap_or(0.0)
    };
    Ok(EvalPoint {
        step,
        closed_book: acc("closed"),
        single_fact: acc("single"),
        two_hop: acc("twohop"),
    })
}

// ---------------------------------------------------------------------------
// training harness

/// How scalar returns reach the individual decisions of a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CreditMode {
    /// Tree rollouts with per-node Monte Carlo credit.
    Tree,
    /// Single trajectories; the final reward is copied to every decision.
    Broadcast,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Questions sampled per optimization step.
    pub batch_questions: usize,
    /// Trajectories per question for the broadcast mode. The baseline is
    /// defined as one sampled trajectory per question with the leaf reward
    /// copied to every node.
    pub trajectories_per_question: usize,
    pub rollout: RolloutConfig,
    pub ppo: PpoConfig,
    /// Behavior-cloning passes over rejection-sampled solutions before PPO.
    pub warmup_rounds: usize,
    pub warmup_lr: f64,
    pub warmup_max_solutions: usize,
    /// Tree rollouts attempted per question during warm-up collection.
    pub warmup_attempts: usize,
    /// Whether warm-up may include two-hop questions. Off by default so
    /// multi-hop chaining is discovered by the RL phase, which is the
    /// behavior the credit-assignment ablation measures.
    pub warmup_two_hop: bool,
    /// Optimization passes over each collected batch; clipping keeps the
    /// later passes bounded.
    pub ppo_epochs: usize,
    /// Fraction of each batch drawn from two-hop questions; the remainder is
    /// sampled uniformly over all questions. Multi-hop success is sparse
    /// early on, so oversampling keeps its learning signal present.
    pub two_hop_fraction: f64,
    /// Stop training once an eval reaches these accuracies (single-fact,
    /// two-hop). `None` always runs the full step budget.
    pub early_stop: Option<(f64, f64)>,
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_questions: 8,
            trajectories_per_question: 1,
            rollout: RolloutConfig {
                max_depth: 7,
                branch_threshold: 3,
                k_high: 2,
                k_low: 1,
                ..RolloutConfig::default()
            },
            ppo: PpoConfig {
                policy_lr: 0.3,
                value_lr: 0.3,
                ..PpoConfig::default()
            },
            warmup_rounds: 10,
            warmup_lr: 0.5,
            warmup_max_solutions: 4,
            warmup_attempts: 6,
            warmup_two_hop: false,
            ppo_epochs: 4,
            two_hop_fraction: 0.5,
            early_stop: None,
            eval_every: 25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub mode: CreditMode,
    pub seed: u64,
    pub curve: Vec<EvalPoint>,
    pub final_eval: EvalPoint,
}

/// Trains a fresh toy policy on the world with the given credit mode.
pub fn train_arm(
    world: &SyntheticWorld,
    mode: CreditMode,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, OrchestratorError> {
    let env = make_backends(world);
    let mut policy = ToySoftmaxPolicy::default();
    let mut value = ToyValue::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9e37).wrapping_add(17));
    let train_questions: Vec<&WorldQuestion> = world.questions.iter().collect();

    // supervised warm-up from rejection-sampled successful paths
    if cfg.warmup_rounds > 0 {
        let qs: Vec<Question> = train_questions
            .iter()
            .filter(|w| cfg.warmup_two_hop || w.kind != QuestionKind::TwoHop)
            .map(|w| w.question.clone())
            .collect();
        let mut wcfg = cfg.rollout.clone();
        wcfg.seed = cfg.seed.wrapping_add(1);
        let solutions = collect_warmup(
            &qs,
            &policy,
            &env,
            &wcfg,
            cfg.warmup_max_solutions,
            cfg.warmup_attempts,
        )?;
        for _ in 0..cfg.warmup_rounds {
            bc_step(&mut policy, &solutions, cfg.warmup_lr).map_err(policy_failure)?;
        }
    }

    let mut curve = vec![evaluate(world, &policy, &env, &cfg.rollout, 0)?];
    for step in 1..=cfg.steps {
        // frozen behavior snapshot: the reference for the KL penalty is the
        // pre-step policy, refreshed every step
        let reference = policy.clone();
        let mut records: Vec<ReplayRecord> = Vec::new();
        let two_hop: Vec<&&WorldQuestion> = train_questions
            .iter()
            .filter(|w| w.kind == QuestionKind::TwoHop)
            .collect();
        let n_two = ((cfg.batch_questions as f64) * cfg.two_hop_fraction).round() as usize;
        for b in 0..cfg.batch_questions {
            let wq = if b < n_two && !two_hop.is_empty() {
                *two_hop[rng.gen_range(0..two_hop.len())]
            } else {
                train_questions[rng.gen_range(0..train_questions.len())]
            };
            match mode {
                CreditMode::Tree => {
                    let mut rcfg = cfg.rollout.clone();
                    rcfg.seed = rng.gen();
                    let tree = build_tree(&wq.question, &policy, &env, &rcfg)?;
                    let credits = assign_credit(&tree);
                    records.extend(disassemble(&tree, &credits));
                }
                CreditMode::Broadcast => {
                    for _ in 0..cfg.trajectories_per_question {
                        let (steps, reward) =
                            sample_trajectory(&wq.question, &policy, &env, &cfg.rollout, &mut rng)?;
                        for (i, s) in steps.into_iter().enumerate() {
                            records.push(ReplayRecord {
                                tree_id: wq.question.id.clone(),
                                node_id: i,
                                agent: s.agent,
                                prompt_text: s.prompt_text,
                                action_text: s.action_raw,
                                old_logprobs: s.old_logprobs,
                                credit: reward,
                            });
                        }
                    }
                }
            }
        }
        // malformed samples terminate with reward 0 and are unscorable;
        // they never enter the replay batch in tree mode, so drop the
        // broadcast mode's equivalents too
        records.retain(|r| policy.logprobs(&r.prompt_text, &r.action_text).is_ok());
        if !records.is_empty() {
            let mut batch =
                prepare_batch(&records, &reference, &value, &cfg.ppo).map_err(policy_failure)?;
            normalize_advantages(&mut batch);
            for _ in 0..cfg.ppo_epochs.max(1) {
                train_step(&mut policy, &mut value, &batch, &cfg.ppo).map_err(policy_failure)?;
            }
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let point = evaluate(world, &policy, &env, &cfg.rollout, step)?;
            curve.push(point);
            if let Some((single, two)) = cfg.early_stop {
                if point.single_fact >= single && point.two_hop >= two {
                    break;
                }
            }
        }
    }
    let final_eval = *curve.last().expect("at least the initial eval");
    Ok(TrainOutcome {
        mode,
        seed: cfg.seed,
        curve,
        final_eval,
    })
}

fn policy_failure(e: crate::policy::PolicyError) -> OrchestratorError {
    OrchestratorError::Environment(crate::env::EnvError::EnvironmentFailure(format!(
        "policy scoring failed: {e}"
    )))
}

// ---------------------------------------------------------------------------
// ablation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub tree: Vec<TrainOutcome>,
    pub broadcast: Vec<TrainOutcome>,
    pub tree_mean: EvalPoint,
    pub broadcast_mean: EvalPoint,
}

fn mean_eval(outcomes: &[TrainOutcome]) -> EvalPoint {
    let n = outcomes.len().max(1) as f64;
    EvalPoint {
        step: outcomes.last().map(|o| o.final_eval.step).unwrap_or(0),
        closed_book: outcomes.iter().map(|o| o.final_eval.closed_book).sum::<f64>() / n,
        single_fact: outcomes.iter().map(|o| o.final_eval.single_fact).sum::<f64>() / n,
        two_hop: outcomes.iter().map(|o| o.final_eval.two_hop).sum::<f64>() / n,
    }
}

/// Runs both credit modes across seeds and aggregates final accuracies.
pub fn run_ablation(
    world: &SyntheticWorld,
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationReport, OrchestratorError> {
    let mut tree = Vec::new();
    let mut broadcast = Vec::new();
    for &seed in seeds {
        let cfg = TrainConfig {
            seed,
            ..base.clone()
        };
        tree.push(train_arm(world, CreditMode::Tree, &cfg)?);
        broadcast.push(train_arm(world, CreditMode::Broadcast, &cfg)?);
    }
    let tree_mean = mean_eval(&tree);
    let broadcast_mean = mean_eval(&broadcast);
    Ok(AblationReport {
        tree,
        broadcast,
        tree_mean,
        broadcast_mean,
    })
}

/// Learning-curve CSV: one row per (mode, seed, eval point).
pub fn write_report_csv(report: &AblationReport, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "mode,seed,step,closed_book,single_fact,two_hop")?;
    for o in report.tree.iter().chain(&report.broadcast) {
        let mode = match o.mode {
            CreditMode::Tree => "tree",
            CreditMode::Broadcast => "broadcast",
        };
        for p in &o.curve {
            writeln!(
                out,
                "{mode},{},{},{:.4},{:.4},{:.4}",
                o.seed, p.step, p.closed_book, p.single_fact, p.two_hop
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_generation_is_deterministic() {
        let a = generate_world(&WorldConfig::default());
        let b = generate_world(&WorldConfig::default());
        assert_eq!(a, b);
        let c = generate_world(&WorldConfig {
            seed: 1,
            ..WorldConfig::default()
        });
        assert_ne!(a.corpus, c.corpus);
    }

    #[test]
    fn every_question_kind_is_present() {
        let world = generate_world(&WorldConfig::default());
        for kind in [
            QuestionKind::ClosedBook,
            QuestionKind::SingleFact,
            QuestionKind::TwoHop,
        ] {
            assert!(
                world.questions.iter().filter(|q| q.kind == kind).count() >= 3,
                "too few {kind:?} questions"
            );
        }
    }

    /// Solvability oracle: every question is answerable by the intended
    /// strategy, and two-hop questions are not answerable by a single
    /// retrieval with the question as the query.
    #[test]
    fn questions_are_solvable_by_intended_strategy_only() {
        let world = generate_world(&WorldConfig::default());
        let env = make_backends(&world);
        let k = world.config.top_k;
        for wq in &world.questions {
            let q = &wq.question;
            match wq.kind {
                QuestionKind::ClosedBook => {
                    let ans = env.llm.answer(q, &[]).unwrap();
                    assert!(env.judge.judge(q, &ans).unwrap().is_success());
                }
                QuestionKind::SingleFact => {
                    // single pass: retrieve with the question, keep everything
                    let docs = env.retriever.retrieve(&q.text, k).unwrap();
                    let ans = env.llm.answer(q, &docs).unwrap();
                    assert!(env.judge.judge(q, &ans).unwrap().is_success(), "{}", q.text);
                }
                QuestionKind::TwoHop => {
                    // the single-pass shortcut must fail
                    let docs = env.retriever.retrieve(&q.text, k).unwrap();
                    let ans = env.llm.answer(q, &docs).unwrap();
                    assert!(!env.judge.judge(q, &ans).unwrap().is_success(), "{}", q.text);
                    // the chained plan must succeed
                    let fixture = &world.fixtures[&q.text];
                    let required = &fixture.rules[0].required_doc_ids;
                    let hop1 = env
                        .retriever
                        .retrieve(&q.text.replace("What is the signature color of the ", ""), k)
                        .unwrap();
                    assert!(hop1.iter().any(|d| d.doc_id == required[0]));
                    let partner_body = &hop1
                        .iter()
                        .find(|d| d.doc_id == required[0])
                        .unwrap()
                        .body;
                    let partner = partner_body
                        .rsplit_once(" is ")
                        .unwrap()
                        .1
                        .trim_end_matches('.');
                    let hop2 = env
                        .retriever
                        .retrieve(&format!("signature color of {partner}"), k)
                        .unwrap();
                    assert!(hop2.iter().any(|d| d.doc_id == required[1]));
                    let mut docs = vec![hop1
                        .iter()
                        .find(|d| d.doc_id == required[0])
                        .unwrap()
                        .clone()];
                    docs.push(hop2.iter().find(|d| d.doc_id == required[1]).unwrap().clone());
                    let ans = env.llm.answer(q, &docs).unwrap();
                    assert!(env.judge.judge(q, &ans).unwrap().is_success());
                }
            }
        }
    }

    #[test]
    fn export_world_round_trips_through_loaders() {
        let world = generate_world(&WorldConfig::default());
        let mut corpus_buf = Vec::new();
        let mut fixtures_buf = Vec::new();
        export_world(&world, &mut corpus_buf, &mut fixtures_buf).unwrap();
        let corpus =
            crate::env::load_corpus_jsonl(std::str::from_utf8(&corpus_buf).unwrap()).unwrap();
        assert_eq!(corpus.len(), world.corpus.len());
        let llm = ScriptedLlm::from_json(std::str::from_utf8(&fixtures_buf).unwrap()).unwrap();
        assert_eq!(llm.fixtures.len(), world.fixtures.len());
    }

    #[test]
    fn short_training_run_masters_warm_up_kinds() {
        let world = generate_world(&WorldConfig::default());
        let cfg = TrainConfig {
            steps: 30,
            eval_every: 30,
            seed: 7,
            ..TrainConfig::default()
        };
        let outcome = train_arm(&world, CreditMode::Tree, &cfg).unwrap();
        let last = outcome.final_eval;
        assert!(
            last.closed_book >= 0.9 && last.single_fact >= 0.9,
            "warm-up kinds regressed: {last:?}"
        );
    }
}
