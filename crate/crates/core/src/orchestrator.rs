//! Deterministic state transitions between agents and the greedy inference
//! pipeline over them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    parse_decision_action, parse_filter_action, parse_router_action, render_prompt, AgentAction,
    AgentId, AgentState, DecisionAction, DecisionChoice, Document, FilterAction, Question,
    RouterAction,
};
use crate::env::{EnvError, EnvironmentBackends};
use crate::policy::Policy;
use crate::rollout::RolloutConfig;

pub const TRACE_SCHEMA_VERSION: u32 = 1;

/// Pipeline shape selected by the Router at the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    DirectAnswer,
    SinglePass,
    MultiStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub question: Question,
    pub strategy: Option<Strategy>,
    pub roadmap: Option<String>,
    pub accumulated_docs: Vec<Document>,
    /// The next agent's observation.
    pub pending: AgentState,
    /// Agent decisions taken so far.
    pub step_count: usize,
}

impl PipelineState {
    pub fn new(question: Question) -> Self {
        PipelineState {
            pending: AgentState::RouterState {
                question: question.clone(),
            },
            question,
            strategy: None,
            roadmap: None,
            accumulated_docs: Vec::new(),
            step_count: 0,
        }
    }
}

/// Result of applying one agent action.
#[derive(Debug, Clone)]
pub enum Transition {
    Next(PipelineState),
    /// Hand the question (and these documents) to the LLM for the answer.
    FinalHandoff { docs: Vec<Document> },
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("agent {agent:?} does not match pending state {state}")]
    StateMismatch { agent: AgentId, state: String },
    #[error(transparent)]
    Environment(#[from] EnvError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvCall {
    pub kind: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub agent: AgentId,
    pub state_digest: String,
    pub raw: String,
    pub parsed: Option<AgentAction>,
    /// True when this action came from the malformed-action fallback.
    pub fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Answered,
    DepthLimit,
    EnvironmentFailure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTrace {
    pub schema_version: u32,
    pub question: Question,
    pub strategy: Option<Strategy>,
    pub steps: Vec<TraceStep>,
    pub env_calls: Vec<EnvCall>,
    pub answer: String,
    pub termination: Termination,
}

/// Union preserving first-insertion order, deduplicated by doc_id.
pub fn accumulate_docs(existing: &[Document], selected: &[Document]) -> Vec<Document> {
    let mut out = existing.to_vec();
    for d in selected {
        if !out.iter().any(|e| e.doc_id == d.doc_id) {
            out.push(d.clone());
        }
    }
    out
}

fn doc_ids(docs: &[Document]) -> String {
    docs.iter()
        .map(|d| d.doc_id.as_str())
        .collect::<Vec<_>>()
        .join(",")
}

/// Maps a filter selection (document indices as rendered in the prompt) back
/// to documents. Out-of-range ids were already dropped by the parser.
pub fn select_by_index(docs: &[Document], selected_ids: &[String]) -> Vec<Document> {
    selected_ids
        .iter()
        .filter_map(|id| id.parse::<usize>().ok())
        .filter_map(|i| docs.get(i))
        .cloned()
        .collect()
}

/// Index strings "0".."n-1" used as valid filter ids.
pub fn index_ids(n: usize) -> Vec<String> {
    (0..n).map(|i| i.to_string()).collect()
}

/// The deterministic transition function over agent states.
pub fn transition(
    ps: &PipelineState,
    agent: AgentId,
    action: &AgentAction,
    env: &EnvironmentBackends,
    calls: &mut Vec<EnvCall>,
) -> Result<Transition, OrchestratorError> {
    if ps.pending.agent() != agent || action.agent() != agent {
        return Err(OrchestratorError::StateMismatch {
            agent,
            state: ps.pending.digest(),
        });
    }
    let mut next = ps.clone();
    next.step_count += 1;
    match action {
        AgentAction::Router(RouterAction::NoRetrieval) => {
            next.strategy = Some(Strategy::DirectAnswer);
            Ok(Transition::FinalHandoff { docs: Vec::new() })
        }
        AgentAction::Router(RouterAction::Retrieval { query }) => {
            next.strategy = Some(Strategy::SinglePass);
            let docs = env.retriever.retrieve(query, top_k(env))?;
            calls.push(EnvCall {
                kind: "retrieve".into(),
                input: query.clone(),
                output: doc_ids(&docs),
            });
            next.pending = AgentState::FilterState {
                question: next.question.clone(),
                retrieved_docs: docs,
                objective: None,
            };
            Ok(Transition::Next(next))
        }
        AgentAction::Router(RouterAction::Planning) => {
            next.strategy = Some(Strategy::MultiStep);
            let roadmap = env.llm.roadmap(&next.question)?;
            calls.push(EnvCall {
                kind: "llm_roadmap".into(),
                input: next.question.text.clone(),
                output: roadmap.clone(),
            });
            next.roadmap = Some(roadmap.clone());
            next.pending = AgentState::DecisionState {
                question: next.question.clone(),
                accumulated_docs: Vec::new(),
                roadmap,
            };
            Ok(Transition::Next(next))
        }
        AgentAction::Decision(DecisionAction { choice, .. }) => match choice {
            DecisionChoice::RetrieveMore { subquery } => {
                let docs = env.retriever.retrieve(subquery, top_k(env))?;
                calls.push(EnvCall {
                    kind: "retrieve".into(),
                    input: subquery.clone(),
                    output: doc_ids(&docs),
                });
                next.pending = AgentState::FilterState {
                    question: next.question.clone(),
                    retrieved_docs: docs,
                    objective: Some(subquery.clone()),
                };
                Ok(Transition::Next(next))
            }
            DecisionChoice::ToLlm => Ok(Transition::FinalHandoff {
                docs: next.accumulated_docs.clone(),
            }),
        },
        AgentAction::Filter(FilterAction { selected_ids, .. }) => {
            let retrieved = match &ps.pending {
                AgentState::FilterState { retrieved_docs, .. } => retrieved_docs,
                _ => unreachable!("agent matched above"),
            };
            let selected = select_by_index(retrieved, selected_ids);
            match ps.strategy {
                Some(Strategy::SinglePass) => Ok(Transition::FinalHandoff { docs: selected }),
                Some(Strategy::MultiStep) => {
                    next.accumulated_docs = accumulate_docs(&ps.accumulated_docs, &selected);
                    next.pending = AgentState::DecisionState {
                        question: next.question.clone(),
                        accumulated_docs: next.accumulated_docs.clone(),
                        roadmap: next.roadmap.clone().unwrap_or_default(),
                    };
                    Ok(Transition::Next(next))
                }
                _ => Err(OrchestratorError::StateMismatch {
                    agent,
                    state: "filter action before strategy set".into(),
                }),
            }
        }
    }
}

// top_k is a rollout-config concern; for bare transitions outside a config we
// use the default. run_inference passes its config through TransitionCtx.
fn top_k(_env: &EnvironmentBackends) -> usize {
    RolloutConfig::default().top_k_docs
}

/// Like [`transition`], but with an explicit top-k for retrieval calls.
pub fn transition_with_k(
    ps: &PipelineState,
    agent: AgentId,
    action: &AgentAction,
    env: &EnvironmentBackends,
    k: usize,
    calls: &mut Vec<EnvCall>,
) -> Result<Transition, OrchestratorError> {
    // Rebind retrieval depth by temporarily wrapping the retriever.
    struct KRetriever {
        inner: std::sync::Arc<dyn crate::env::Retriever>,
        k: usize,
    }
    impl crate::env::Retriever for KRetriever {
        fn retrieve(&self, query: &str, _k: usize) -> Result<Vec<Document>, EnvError> {
            self.inner.retrieve(query, self.k)
        }
    }
    let env = EnvironmentBackends {
        retriever: std::sync::Arc::new(KRetriever {
            inner: env.retriever.clone(),
            k,
        }),
        llm: env.llm.clone(),
        judge: env.judge.clone(),
    };
    transition(ps, agent, action, &env, calls)
}

fn fallback_action(agent: AgentId, ps: &PipelineState) -> AgentAction {
    match agent {
        AgentId::Router => AgentAction::Router(RouterAction::Retrieval {
            query: ps.question.text.clone(),
        }),
        AgentId::Filter => {
            let n = match &ps.pending {
                AgentState::FilterState { retrieved_docs, .. } => retrieved_docs.len(),
                _ => 0,
            };
            AgentAction::Filter(FilterAction {
                thought: String::new(),
                selected_ids: index_ids(n),
            })
        }
        AgentId::Decision => AgentAction::Decision(DecisionAction {
            thought: String::new(),
            choice: DecisionChoice::ToLlm,
        }),
    }
}

pub fn parse_action_for(
    agent: AgentId,
    raw: &str,
    ps: &PipelineState,
) -> Result<AgentAction, crate::agent::AgentError> {
    match agent {
        AgentId::Router => parse_router_action(raw).map(AgentAction::Router),
        AgentId::Filter => {
            let n = match &ps.pending {
                AgentState::FilterState { retrieved_docs, .. } => retrieved_docs.len(),
                _ => 0,
            };
            parse_filter_action(raw, &index_ids(n)).map(AgentAction::Filter)
        }
        AgentId::Decision => parse_decision_action(raw).map(AgentAction::Decision),
    }
}

/// Runs the full inference pipeline with greedy decoding: Router selects the
/// strategy, then the strategy-specific loop runs until a final handoff or
/// the step budget is exhausted. The answer-generation LLM call happens
/// exactly once per question.
pub fn run_inference(
    question: &Question,
    env: &EnvironmentBackends,
    policy: &dyn Policy,
    cfg: &RolloutConfig,
) -> Result<(String, InferenceTrace), OrchestratorError> {
    assert!(cfg.max_depth >= 3, "max_depth must be >= 3");
    let mut trace = InferenceTrace {
        schema_version: TRACE_SCHEMA_VERSION,
        question: question.clone(),
        strategy: None,
        steps: Vec::new(),
        env_calls: Vec::new(),
        answer: String::new(),
        termination: Termination::Answered,
    };
    let mut ps = PipelineState::new(question.clone());
    let mut rng = rand::rngs::mock::StepRng::new(0, 0); // greedy decoding ignores rng

    let handoff_docs = loop {
        if ps.step_count >= cfg.max_depth {
            trace.termination = Termination::DepthLimit;
            break ps.accumulated_docs.clone();
        }
        let agent = ps.pending.agent();
        let prompt = render_prompt(agent, &ps.pending).expect("pending state matches its agent");

        let mut action = None;
        for _attempt in 0..=cfg.parse_retry {
            let sampled = policy.sample(&prompt, 0.0, &mut rng);
            match parse_action_for(agent, &sampled.text, &ps) {
                Ok(parsed) => {
                    trace.steps.push(TraceStep {
                        agent,
                        state_digest: ps.pending.digest(),
                        raw: sampled.text,
                        parsed: Some(parsed.clone()),
                        fallback: false,
                    });
                    action = Some(parsed);
                    break;
                }
                Err(_) => {
                    trace.steps.push(TraceStep {
                        agent,
                        state_digest: ps.pending.digest(),
                        raw: sampled.text,
                        parsed: None,
                        fallback: false,
                    });
                }
            }
        }
        let action = action.unwrap_or_else(|| {
            let fb = fallback_action(agent, &ps);
            trace.steps.push(TraceStep {
                agent,
                state_digest: ps.pending.digest(),
                raw: crate::agent::render_canonical(&fb),
                parsed: Some(fb.clone()),
                fallback: true,
            });
            fb
        });

        let strategy_before = ps.strategy;
        match transition_with_k(&ps, agent, &action, env, cfg.top_k_docs, &mut trace.env_calls) {
            Ok(Transition::Next(next)) => {
                if strategy_before.is_none() {
                    trace.strategy = next.strategy;
                }
                ps = next;
            }
            Ok(Transition::FinalHandoff { docs }) => {
                if trace.strategy.is_none() {
                    // DirectAnswer sets strategy only on the handoff path.
                    trace.strategy = Some(match action {
                        AgentAction::Router(RouterAction::NoRetrieval) => Strategy::DirectAnswer,
                        _ => ps.strategy.unwrap_or(Strategy::SinglePass),
                    });
                }
                break docs;
            }
            Err(e) => {
                trace.termination = Termination::EnvironmentFailure;
                return Err(e);
            }
        }
    };

    let answer = env.llm.answer(question, &handoff_docs)?;
    trace.env_calls.push(EnvCall {
        kind: "llm_answer".into(),
        input: doc_ids(&handoff_docs),
        output: answer.clone(),
    });
    trace.answer = answer.clone();
    if trace.strategy.is_none() {
        trace.strategy = ps.strategy;
    }
    Ok((answer, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{AnswerRule, ExactMatchJudge, InMemoryRetriever, QuestionFixture, ScriptedLlm};
    use crate::policy::ScriptedPolicy;
    use std::sync::Arc;

    fn d(id: &str) -> Document {
        Document::new(id, id.to_uppercase(), format!("body of {id}"))
    }

    fn scripted_env() -> EnvironmentBackends {
        let corpus = vec![
            Document::new("d1", "Caper", "The Caper Of The Golden Bulls was directed by Russell Rouse."),
            Document::new("d2", "Rouse", "Russell Rouse was an American director."),
            Document::new("d3", "Noise", "Unrelated noise document about gardening."),
        ];
        let mut llm = ScriptedLlm::default();
        llm.fixtures.insert(
            "What nationality is the director of film The Caper Of The Golden Bulls?".into(),
            QuestionFixture {
                closed_book_answer: None,
                roadmap: Some("Step 1: Retrieve the relevant documents that mention the film.\nStep 2: Identify the director.\nStep 3: Retrieve the nationality of the director.\nStep 4: Provide the answer.".into()),
                rules: vec![AnswerRule {
                    required_doc_ids: vec!["d1".into(), "d2".into()],
                    answer: "American".into(),
                }],
                wrong_answer: Some("Unknown".into()),
            },
        );
        llm.fixtures.insert(
            "capital of France?".into(),
            QuestionFixture {
                closed_book_answer: Some("Paris".into()),
                ..Default::default()
            },
        );
        EnvironmentBackends {
            retriever: Arc::new(InMemoryRetriever::new(corpus)),
            llm: Arc::new(llm),
            judge: Arc::new(ExactMatchJudge),
        }
    }

    #[test]
    fn accumulate_rules() {
        let (d1, d2) = (d("d1"), d("d2"));
        assert_eq!(accumulate_docs(&[], &[d1.clone(), d2.clone()]), vec![d1.clone(), d2.clone()]);
        assert_eq!(
            accumulate_docs(&[d1.clone()], &[d2.clone(), d1.clone()]),
            vec![d1.clone(), d2.clone()]
        );
        assert_eq!(accumulate_docs(&[d1.clone(), d2.clone()], &[]), vec![d1, d2]);
    }

    #[test]
    fn no_retrieval_hands_off_with_empty_docs() {
        let env = scripted_env();
        let ps = PipelineState::new(Question::new("q", "capital of France?"));
        let mut calls = Vec::new();
        let t = transition(
            &ps,
            AgentId::Router,
            &AgentAction::Router(RouterAction::NoRetrieval),
            &env,
            &mut calls,
        )
        .unwrap();
        match t {
            Transition::FinalHandoff { docs } => assert!(docs.is_empty()),
            _ => panic!("expected handoff"),
        }
    }

    #[test]
    fn state_mismatch_is_error() {
        let env = scripted_env();
        let ps = PipelineState::new(Question::new("q", "capital of France?"));
        let err = transition(
            &ps,
            AgentId::Decision,
            &AgentAction::Decision(DecisionAction {
                thought: String::new(),
                choice: DecisionChoice::ToLlm,
            }),
            &env,
            &mut Vec::new(),
        );
        assert!(matches!(err, Err(OrchestratorError::StateMismatch { .. })));
    }

    #[test]
    fn direct_answer_inference() {
        let env = scripted_env();
        let policy = ScriptedPolicy::new().script("Question: capital of France?", &["[No Retrieval]"]);
        let q = Question::new("q", "capital of France?");
        let (answer, trace) = run_inference(&q, &env, &policy, &RolloutConfig::default()).unwrap();
        assert_eq!(answer, "Paris");
        assert_eq!(trace.strategy, Some(Strategy::DirectAnswer));
        assert_eq!(trace.termination, Termination::Answered);
        // answer-generation LLM called exactly once
        assert_eq!(
            trace.env_calls.iter().filter(|c| c.kind == "llm_answer").count(),
            1
        );
    }

    #[test]
    fn two_hop_multistep_inference() {
        let env = scripted_env();
        let qtext = "What nationality is the director of film The Caper Of The Golden Bulls?";
        let policy = ScriptedPolicy::new()
            .script("evaluating whether a given question requires", &["[Planning]"])
            .script(
                "Current step's objectives: film The Caper Of The Golden Bulls",
                &["Thought: doc 0 mentions the film\nAction: [0]"],
            )
            .script(
                "Current step's objectives: nationality of Russell Rouse",
                &["Thought: doc 1 has the nationality\nAction: [1]"],
            )
            .script(
                "Existing Documents: (none)",
                &["Thought: need the film first\nAction: [Retrieval] `film The Caper Of The Golden Bulls`"],
            )
            .script(
                "Existing Documents: [0]",
                &[
                    "Thought: need the nationality\nAction: [Retrieval] `nationality of Russell Rouse`",
                    "Thought: all subgoals covered\nAction: [LLM]",
                ],
            );
        let q = Question::new("q", qtext).with_gold("American");
        let (answer, trace) = run_inference(&q, &env, &policy, &RolloutConfig::default()).unwrap();
        assert_eq!(answer, "American");
        assert_eq!(trace.strategy, Some(Strategy::MultiStep));
        // planning -> (retrieve, filter) x2 -> [LLM]: roadmap fetched once
        assert_eq!(
            trace.env_calls.iter().filter(|c| c.kind == "llm_roadmap").count(),
            1
        );
        assert_eq!(
            trace.env_calls.iter().filter(|c| c.kind == "llm_answer").count(),
            1
        );
        let final_docs: Vec<&str> = trace
            .env_calls
            .iter()
            .find(|c| c.kind == "llm_answer")
            .unwrap()
            .input
            .split(',')
            .collect();
        assert_eq!(final_docs, vec!["d1", "d2"]);
    }

    #[test]
    fn depth_limit_forces_handoff() {
        let env = scripted_env();
        let qtext = "What nationality is the director of film The Caper Of The Golden Bulls?";
        // decision maker never emits [LLM]
        let policy = ScriptedPolicy::new()
            .script("evaluating whether a given question requires", &["[Planning]"])
            .script("analyzing the retrieved documents", &["Thought: keep 0\nAction: [0]"])
            .script(
                "determining the next appropriate action",
                &["Thought: more\nAction: [Retrieval] `film The Caper Of The Golden Bulls`"],
            );
        let q = Question::new("q", qtext);
        let (answer, trace) = run_inference(&q, &env, &policy, &RolloutConfig::default()).unwrap();
        assert_eq!(trace.termination, Termination::DepthLimit);
        assert_eq!(answer, "Unknown"); // accumulated lacks d2
        assert!(trace.steps.len() <= RolloutConfig::default().max_depth + 1);
    }

    #[test]
    fn malformed_fallbacks_apply() {
        let env = scripted_env();
        // router always malformed -> falls back to Retrieval(question verbatim);
        // filter always malformed -> selects all docs; single-pass answers.
        let policy = ScriptedPolicy::new()
            .script("evaluating whether a given question requires", &["garbage", "garbage", "garbage"])
            .script("analyzing the retrieved documents", &["garbage", "garbage", "garbage"]);
        let qtext = "What nationality is the director of film The Caper Of The Golden Bulls?";
        let q = Question::new("q", qtext);
        let (_answer, trace) = run_inference(&q, &env, &policy, &RolloutConfig::default()).unwrap();
        assert_eq!(trace.strategy, Some(Strategy::SinglePass));
        let fallbacks: Vec<&TraceStep> = trace.steps.iter().filter(|s| s.fallback).collect();
        assert_eq!(fallbacks.len(), 2);
        assert!(matches!(
            fallbacks[0].parsed,
            Some(AgentAction::Router(RouterAction::Retrieval { .. }))
        ));
    }

    #[test]
    fn inference_is_deterministic() {
        let env = scripted_env();
        let policy = ScriptedPolicy::new().script("Question: capital of France?", &["[No Retrieval]"]);
        let q = Question::new("q", "capital of France?");
        let (_, t1) = run_inference(&q, &env, &policy, &RolloutConfig::default()).unwrap();
        let policy2 = ScriptedPolicy::new().script("Question: capital of France?", &["[No Retrieval]"]);
        let (_, t2) = run_inference(&q, &env, &policy2, &RolloutConfig::default()).unwrap();
        assert_eq!(
            serde_json::to_string(&t1).unwrap(),
            serde_json::to_string(&t2).unwrap()
        );
    }
}
