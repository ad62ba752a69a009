//! Retrieval, LLM, and reward-judge backends: deterministic scripted
//! stand-ins plus live HTTP clients behind the same interfaces.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{render_judge_prompt, render_roadmap_prompt, Document, Question};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("environment failure: {0}")]
    EnvironmentFailure(String),
    #[error("judge reply was neither True nor False: {0:?}")]
    JudgeUnparseable(String),
    #[error("empty query")]
    EmptyQuery,
}

/// Binary system-level reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardValue(pub f64);

impl RewardValue {
    pub const SUCCESS: RewardValue = RewardValue(1.0);
    pub const FAILURE: RewardValue = RewardValue(0.0);

    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Self::SUCCESS
        } else {
            Self::FAILURE
        }
    }

    pub fn is_success(&self) -> bool {
        self.0 == 1.0
    }
}

pub trait Retriever: Send + Sync {
    /// At most `k` ranked documents.
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Document>, EnvError>;
}

pub trait LlmClient: Send + Sync {
    /// Answer generation; `docs` may be empty for direct answering.
    fn answer(&self, question: &Question, docs: &[Document]) -> Result<String, EnvError>;
    /// Roadmap generation for the multi-step strategy.
    fn roadmap(&self, question: &Question) -> Result<String, EnvError>;
    /// Raw completion, used by the LLM judge.
    fn complete(&self, prompt: &str) -> Result<String, EnvError>;
}

pub trait JudgeBackend: Send + Sync {
    fn judge(&self, question: &Question, predicted: &str) -> Result<RewardValue, EnvError>;
}

#[derive(Clone)]
pub struct EnvironmentBackends {
    pub retriever: Arc<dyn Retriever>,
    pub llm: Arc<dyn LlmClient>,
    pub judge: Arc<dyn JudgeBackend>,
}

/// Lowercase alphanumeric word split shared by the retriever and judges.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_string())
        .collect()
}

/// Lexical retriever over a fixed corpus: ranks by the number of distinct
/// query tokens present in title+body, tie-broken by doc_id.
pub struct InMemoryRetriever {
    corpus: Vec<Document>,
}

impl InMemoryRetriever {
    pub fn new(corpus: Vec<Document>) -> Self {
        InMemoryRetriever { corpus }
    }

    /// Distinct query tokens found in the document.
    pub fn overlap_score(query: &str, doc: &Document) -> usize {
        let doc_tokens: std::collections::BTreeSet<String> =
            tokenize(&format!("{} {}", doc.title, doc.body))
                .into_iter()
                .collect();
        let query_tokens: std::collections::BTreeSet<String> =
            tokenize(query).into_iter().collect();
        query_tokens.iter().filter(|t| doc_tokens.contains(*t)).count()
    }
}

impl Retriever for InMemoryRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Document>, EnvError> {
        if query.trim().is_empty() {
            return Err(EnvError::EmptyQuery);
        }
        let mut scored: Vec<(usize, &Document)> = self
            .corpus
            .iter()
            .map(|d| (Self::overlap_score(query, d), d))
            .filter(|(s, _)| *s > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.doc_id.cmp(&b.1.doc_id)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(_, d)| {
                let mut d = d.clone();
                d.origin_query = query.to_string();
                d
            })
            .collect())
    }
}

/// One answer rule of the scripted LLM: applies when all required documents
/// were provided.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRule {
    pub required_doc_ids: Vec<String>,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QuestionFixture {
    #[serde(default)]
    pub closed_book_answer: Option<String>,
    #[serde(default)]
    pub roadmap: Option<String>,
    #[serde(default)]
    pub rules: Vec<AnswerRule>,
    #[serde(default)]
    pub wrong_answer: Option<String>,
}

/// Rule-table LLM keyed by question text. Referentially transparent.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedLlm {
    pub fixtures: BTreeMap<String, QuestionFixture>,
    /// Completion replies keyed by full prompt, for judge tests.
    #[serde(default)]
    pub completions: BTreeMap<String, String>,
}

impl ScriptedLlm {
    pub fn from_json(json: &str) -> Result<Self, EnvError> {
        serde_json::from_str(json)
            .map_err(|e| EnvError::EnvironmentFailure(format!("bad fixture json: {e}")))
    }

    fn fixture(&self, question: &Question) -> Result<&QuestionFixture, EnvError> {
        self.fixtures.get(&question.text).ok_or_else(|| {
            EnvError::EnvironmentFailure(format!("no fixture for question {:?}", question.text))
        })
    }
}

impl LlmClient for ScriptedLlm {
    fn answer(&self, question: &Question, docs: &[Document]) -> Result<String, EnvError> {
        let fx = self.fixture(question)?;
        let provided: Vec<&str> = docs.iter().map(|d| d.doc_id.as_str()).collect();
        for rule in &fx.rules {
            if rule
                .required_doc_ids
                .iter()
                .all(|r| provided.contains(&r.as_str()))
            {
                return Ok(rule.answer.clone());
            }
        }
        if let Some(cb) = &fx.closed_book_answer {
            return Ok(cb.clone());
        }
        Ok(fx
            .wrong_answer
            .clone()
            .unwrap_or_else(|| "I don't know.".to_string()))
    }

    fn roadmap(&self, question: &Question) -> Result<String, EnvError> {
        let fx = self.fixture(question)?;
        fx.roadmap.clone().ok_or_else(|| {
            EnvError::EnvironmentFailure(format!("no roadmap fixture for {:?}", question.text))
        })
    }

    fn complete(&self, prompt: &str) -> Result<String, EnvError> {
        self.completions
            .get(prompt)
            .cloned()
            .ok_or_else(|| EnvError::EnvironmentFailure("no fixture".into()))
    }
}

/// Standard open-domain QA normalization: casefold, strip punctuation and
/// articles, collapse whitespace. Idempotent.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic judge: normalized prediction must equal any normalized gold.
pub struct ExactMatchJudge;

impl JudgeBackend for ExactMatchJudge {
    fn judge(&self, question: &Question, predicted: &str) -> Result<RewardValue, EnvError> {
        assert!(
            !question.gold_answers.is_empty(),
            "judge requires gold answers"
        );
        let p = normalize_answer(predicted);
        let ok = question
            .gold_answers
            .iter()
            .any(|g| normalize_answer(g) == p);
        Ok(RewardValue::from_bool(ok))
    }
}

/// Renders the validation prompt and asks an LLM backend; accepts only
/// True/False replies.
pub struct LlmJudge {
    pub llm: Arc<dyn LlmClient>,
}

impl JudgeBackend for LlmJudge {
    fn judge(&self, question: &Question, predicted: &str) -> Result<RewardValue, EnvError> {
        assert!(
            !question.gold_answers.is_empty(),
            "judge requires gold answers"
        );
        let prompt = render_judge_prompt(question, predicted);
        let reply = self.llm.complete(&prompt)?;
        match reply.trim() {
            "True" => Ok(RewardValue::SUCCESS),
            "False" => Ok(RewardValue::FAILURE),
            other => Err(EnvError::JudgeUnparseable(other.to_string())),
        }
    }
}

// --- Wire formats -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRequest {
    pub query: String,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireDocument {
    pub id: String,
    pub title: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResponse {
    pub documents: Vec<WireDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatChoice {
    pub message: ChatMessage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub choices: Vec<ChatChoice>,
}

pub fn build_search_request(query: &str, k: usize) -> SearchRequest {
    SearchRequest {
        query: query.to_string(),
        k,
    }
}

pub fn build_chat_request(model: &str, prompt: &str, temperature: f64, max_tokens: usize) -> ChatRequest {
    ChatRequest {
        model: model.to_string(),
        messages: vec![ChatMessage {
            role: "user".to_string(),
            content: prompt.to_string(),
        }],
        temperature,
        max_tokens,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: usize,
    pub initial_backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 200,
            timeout_ms: 30_000,
        }
    }
}

fn with_retries<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut() -> Result<T, String>,
) -> Result<T, EnvError> {
    let mut backoff = policy.initial_backoff_ms;
    let mut last_err = String::new();
    for attempt in 0..policy.attempts.max(1) {
        match op() {
            Ok(v) => return Ok(v),
            Err(e) => {
                last_err = e;
                if attempt + 1 < policy.attempts {
                    std::thread::sleep(Duration::from_millis(backoff));
                    backoff = backoff.saturating_mul(2);
                }
            }
        }
    }
    Err(EnvError::EnvironmentFailure(last_err))
}

/// HTTP retriever speaking the POST /search protocol.
pub struct LiveRetriever {
    endpoint: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl LiveRetriever {
    pub fn new(endpoint: impl Into<String>, retry: RetryPolicy) -> Result<Self, EnvError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(retry.timeout_ms))
            .build()
            .map_err(|e| EnvError::EnvironmentFailure(e.to_string()))?;
        Ok(LiveRetriever {
            endpoint: endpoint.into(),
            client,
            retry,
        })
    }
}

impl Retriever for LiveRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<Document>, EnvError> {
        if query.trim().is_empty() {
            return Err(EnvError::EmptyQuery);
        }
        let body = build_search_request(query, k);
        let resp: SearchResponse = with_retries(&self.retry, || {
            self.client
                .post(&self.endpoint)
                .json(&body)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json())
                .map_err(|e| format!("retriever {}: {e}", self.endpoint))
        })?;
        Ok(resp
            .documents
            .into_iter()
            .take(k)
            .map(|d| Document {
                doc_id: d.id,
                title: d.title,
                body: d.text,
                origin_query: query.to_string(),
            })
            .collect())
    }
}

/// HTTP client speaking the chat-completions protocol. Answer, roadmap, and
/// judge calls all decode at temperature 0.
pub struct LiveLlm {
    endpoint: String,
    model: String,
    max_tokens: usize,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl LiveLlm {
    pub const API_KEY_ENV: &'static str = "RAGPROXY_LLM_API_KEY";

    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        max_tokens: usize,
        retry: RetryPolicy,
    ) -> Result<Self, EnvError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(retry.timeout_ms))
            .build()
            .map_err(|e| EnvError::EnvironmentFailure(e.to_string()))?;
        Ok(LiveLlm {
            endpoint: endpoint.into(),
            model: model.into(),
            max_tokens,
            api_key: std::env::var(Self::API_KEY_ENV).ok(),
            client,
            retry,
        })
    }

    fn chat(&self, prompt: &str) -> Result<String, EnvError> {
        let body = build_chat_request(&self.model, prompt, 0.0, self.max_tokens);
        let resp: ChatResponse = with_retries(&self.retry, || {
            let mut req = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            req.send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json())
                .map_err(|e| format!("llm {}: {e}", self.endpoint))
        })?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| EnvError::EnvironmentFailure("empty choices".into()))
    }
}

impl LlmClient for LiveLlm {
    fn answer(&self, question: &Question, docs: &[Document]) -> Result<String, EnvError> {
        let prompt = if docs.is_empty() {
            question.text.clone()
        } else {
            format!(
                "Answer the question based on the following documents.\n\nDocuments:\n{}\n\nQuestion: {}",
                crate::agent::render_documents(docs),
                question.text
            )
        };
        self.chat(&prompt)
    }

    fn roadmap(&self, question: &Question) -> Result<String, EnvError> {
        self.chat(&render_roadmap_prompt(question))
    }

    fn complete(&self, prompt: &str) -> Result<String, EnvError> {
        self.chat(prompt)
    }
}

/// Loads a corpus from JSONL, one document per line.
pub fn load_corpus_jsonl(content: &str) -> Result<Vec<Document>, EnvError> {
    let mut docs = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let d: Document = serde_json::from_str(line)
            .map_err(|e| EnvError::EnvironmentFailure(format!("corpus line {}: {e}", i + 1)))?;
        docs.push(d);
    }
    Ok(docs)
}
