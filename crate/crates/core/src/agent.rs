//! Domain types for the three proxy agents, their action grammars, and
//! prompt rendering from the instruction templates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The three agent roles played by the proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentId {
    Router,
    Filter,
    Decision,
}

impl AgentId {
    pub const ALL: [AgentId; 3] = [AgentId::Router, AgentId::Filter, AgentId::Decision];

    pub fn name(&self) -> &'static str {
        match self {
            AgentId::Router => "router",
            AgentId::Filter => "filter",
            AgentId::Decision => "decision",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    /// Acceptable answer strings; may be empty at inference time.
    #[serde(default)]
    pub gold_answers: Vec<String>,
}

impl Question {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        assert!(!text.is_empty(), "question text must be non-empty");
        Question {
            id: id.into(),
            text,
            gold_answers: Vec::new(),
        }
    }

    pub fn with_gold(mut self, gold: impl Into<String>) -> Self {
        self.gold_answers.push(gold.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
    /// The query that retrieved this document.
    #[serde(default)]
    pub origin_query: String,
}

impl Document {
    pub fn new(
        doc_id: impl Into<String>,
        title: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        Document {
            doc_id: doc_id.into(),
            title: title.into(),
            body: body.into(),
            origin_query: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RouterAction {
    NoRetrieval,
    Retrieval { query: String },
    Planning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterAction {
    pub thought: String,
    /// Ordered, duplicate-free ids; always a subset of the valid ids the
    /// parser was given.
    pub selected_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionAction {
    pub thought: String,
    pub choice: DecisionChoice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionChoice {
    RetrieveMore { subquery: String },
    ToLlm,
}

/// Any parsed agent action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AgentAction {
    Router(RouterAction),
    Filter(FilterAction),
    Decision(DecisionAction),
}

impl AgentAction {
    pub fn agent(&self) -> AgentId {
        match self {
            AgentAction::Router(_) => AgentId::Router,
            AgentAction::Filter(_) => AgentId::Filter,
            AgentAction::Decision(_) => AgentId::Decision,
        }
    }
}

/// Per-agent observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AgentState {
    RouterState {
        question: Question,
    },
    FilterState {
        question: Question,
        retrieved_docs: Vec<Document>,
        /// Present only in multi-step mode.
        objective: Option<String>,
    },
    DecisionState {
        question: Question,
        accumulated_docs: Vec<Document>,
        roadmap: String,
    },
}

impl AgentState {
    pub fn agent(&self) -> AgentId {
        match self {
            AgentState::RouterState { .. } => AgentId::Router,
            AgentState::FilterState { .. } => AgentId::Filter,
            AgentState::DecisionState { .. } => AgentId::Decision,
        }
    }

    pub fn question(&self) -> &Question {
        match self {
            AgentState::RouterState { question }
            | AgentState::FilterState { question, .. }
            | AgentState::DecisionState { question, .. } => question,
        }
    }

    /// One-line summary for traces.
    pub fn digest(&self) -> String {
        match self {
            AgentState::RouterState { question } => format!("router(q={:?})", question.text),
            AgentState::FilterState {
                question,
                retrieved_docs,
                objective,
            } => format!(
                "filter(q={:?}, docs={}, objective={})",
                question.text,
                retrieved_docs.len(),
                objective.as_deref().unwrap_or("-")
            ),
            AgentState::DecisionState {
                question,
                accumulated_docs,
                ..
            } => format!(
                "decision(q={:?}, accumulated={})",
                question.text,
                accumulated_docs.len()
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("state variant {state} does not match agent {agent}")]
    SlotMismatch { agent: &'static str, state: String },
}

pub const ROUTER_TEMPLATE: &str = include_str!("../templates/router.txt");
pub const FILTER_TEMPLATE: &str = include_str!("../templates/filter.txt");
pub const DECISION_TEMPLATE: &str = include_str!("../templates/decision.txt");
pub const ROADMAP_TEMPLATE: &str = include_str!("../templates/roadmap.txt");
pub const JUDGE_TEMPLATE: &str = include_str!("../templates/judge.txt");

const NO_RETRIEVAL_TOKEN: &str = "[No Retrieval]";
const RETRIEVAL_TOKEN: &str = "[Retrieval]";
const PLANNING_TOKEN: &str = "[Planning]";
const LLM_TOKEN: &str = "[LLM]";

/// Strips one pair of surrounding backticks, then whitespace. Rejects empty
/// and multi-line queries.
fn clean_query(raw: &str) -> Result<String, AgentError> {
    let mut q = raw.trim();
    if q.len() >= 2 && q.starts_with('`') && q.ends_with('`') {
        q = &q[1..q.len() - 1];
    }
    let q = q.trim();
    if q.is_empty() {
        return Err(AgentError::MalformedAction("empty query".into()));
    }
    if q.contains('\n') {
        return Err(AgentError::MalformedAction("multi-line query".into()));
    }
    Ok(q.to_string())
}

/// Parses the Router's full decoded output. The bracket token must be the
/// first non-whitespace token; case-sensitive.
pub fn parse_router_action(raw: &str) -> Result<RouterAction, AgentError> {
    let s = raw.trim_start();
    if s.starts_with(NO_RETRIEVAL_TOKEN) {
        Ok(RouterAction::NoRetrieval)
    } else if s.starts_with(PLANNING_TOKEN) {
        Ok(RouterAction::Planning)
    } else if let Some(rest) = s.strip_prefix(RETRIEVAL_TOKEN) {
        let query = clean_query(rest)?;
        Ok(RouterAction::Retrieval { query })
    } else {
        Err(AgentError::MalformedAction(
            "no recognized bracket token at start".into(),
        ))
    }
}

fn split_thought_action(raw: &str) -> (String, Option<&str>) {
    let mut thought_lines: Vec<&str> = Vec::new();
    let mut in_thought = false;
    for line in raw.lines() {
        if let Some(rest) = line.trim_start().strip_prefix("Action:") {
            let thought = thought_lines.join("\n").trim().to_string();
            return (thought, Some(rest));
        }
        if let Some(rest) = line.trim_start().strip_prefix("Thought:") {
            in_thought = true;
            thought_lines.push(rest.trim());
        } else if in_thought {
            thought_lines.push(line);
        }
    }
    (thought_lines.join("\n").trim().to_string(), None)
}

/// Parses the Filter's structured Thought/Action output. Ids are intersected
/// with `valid_ids` in first-appearance order; duplicates and out-of-range
/// ids are dropped silently.
pub fn parse_filter_action(raw: &str, valid_ids: &[String]) -> Result<FilterAction, AgentError> {
    let (thought, action) = split_thought_action(raw);
    let action =
        action.ok_or_else(|| AgentError::MalformedAction("missing Action line".into()))?;
    let open = action
        .find('[')
        .ok_or_else(|| AgentError::MalformedAction("missing id list".into()))?;
    let close = action[open..]
        .find(']')
        .map(|i| open + i)
        .ok_or_else(|| AgentError::MalformedAction("unclosed id list".into()))?;
    let mut selected_ids = Vec::new();
    for token in action[open + 1..close].split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        if valid_ids.iter().any(|v| v == token) && !selected_ids.iter().any(|s| s == token) {
            selected_ids.push(token.to_string());
        }
    }
    Ok(FilterAction {
        thought,
        selected_ids,
    })
}

/// Parses the Decision Maker's structured Thought/Action output.
pub fn parse_decision_action(raw: &str) -> Result<DecisionAction, AgentError> {
    let (thought, action) = split_thought_action(raw);
    let action =
        action.ok_or_else(|| AgentError::MalformedAction("missing Action line".into()))?;
    let action = action.trim_start();
    let choice = if action.starts_with(LLM_TOKEN) {
        DecisionChoice::ToLlm
    } else if let Some(rest) = action.strip_prefix(RETRIEVAL_TOKEN) {
        DecisionChoice::RetrieveMore {
            subquery: clean_query(rest)?,
        }
    } else {
        return Err(AgentError::MalformedAction(
            "unknown decision token".into(),
        ))
    };
    Ok(DecisionAction { thought, choice })
}

/// Inverse formatter: canonical text whose parse yields the action back.
pub fn render_canonical(action: &AgentAction) -> String {
    match action {
        AgentAction::Router(RouterAction::NoRetrieval) => NO_RETRIEVAL_TOKEN.to_string(),
        AgentAction::Router(RouterAction::Retrieval { query }) => {
            format!("{} `{}`", RETRIEVAL_TOKEN, query)
        }
        AgentAction::Router(RouterAction::Planning) => PLANNING_TOKEN.to_string(),
        AgentAction::Filter(FilterAction {
            thought,
            selected_ids,
        }) => format!(
            "Thought: {}\nAction: [{}]",
            thought,
            selected_ids.join(", ")
        ),
        AgentAction::Decision(DecisionAction { thought, choice }) => match choice {
            DecisionChoice::ToLlm => format!("Thought: {}\nAction: {}", thought, LLM_TOKEN),
            DecisionChoice::RetrieveMore { subquery } => format!(
                "Thought: {}\nAction: {} `{}`",
                thought, RETRIEVAL_TOKEN, subquery
            ),
        },
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in slots {
        out = out.replace(&format!("{{{}}}", name), value);
    }
    out
}

/// Documents numbered from 0, in list order.
pub fn render_documents(docs: &[Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("[{}] {}: {}", i, d.title, d.body))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Renders the instruction prompt for `agent` over `state`. Deterministic and
/// byte-stable; never re-wraps whitespace.
pub fn render_prompt(agent: AgentId, state: &AgentState) -> Result<String, AgentError> {
    if state.agent() != agent {
        return Err(AgentError::SlotMismatch {
            agent: agent.name(),
            state: state.digest(),
        });
    }
    Ok(match state {
        AgentState::RouterState { question } => {
            fill(ROUTER_TEMPLATE, &[("question", &question.text)])
        }
        AgentState::FilterState {
            question,
            retrieved_docs,
            objective,
        } => {
            let objective_block = match objective {
                Some(obj) => format!("Current step's objectives: {}\n\n", obj),
                None => String::new(),
            };
            fill(
                FILTER_TEMPLATE,
                &[
                    ("objective_block", &objective_block),
                    ("question", &question.text),
                    ("documents", &render_documents(retrieved_docs)),
                ],
            )
        }
        AgentState::DecisionState {
            question,
            accumulated_docs,
            roadmap,
        } => {
            let accumulated = if accumulated_docs.is_empty() {
                "(none)".to_string()
            } else {
                render_documents(accumulated_docs)
            };
            fill(
                DECISION_TEMPLATE,
                &[
                    ("accumulated_documents", &accumulated),
                    ("roadmap", roadmap),
                    ("question", &question.text),
                ],
            )
        }
    })
}

/// Renders the roadmap-generation prompt sent to the LLM.
pub fn render_roadmap_prompt(question: &Question) -> String {
    fill(ROADMAP_TEMPLATE, &[("question", &question.text)])
}

/// Renders the answer-validation prompt for the LLM judge.
pub fn render_judge_prompt(question: &Question, predicted: &str) -> String {
    let golds = format!("[{}]", question.gold_answers.join(", "));
    fill(
        JUDGE_TEMPLATE,
        &[
            ("question", &question.text),
            ("true_answer", &golds),
            ("long_answer", predicted),
        ],
    )
}
