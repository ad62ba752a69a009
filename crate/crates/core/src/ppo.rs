//! Multi-agent PPO over replay records, plus a small trainable policy and
//! value function used for closed-loop testing.
//!
//! The optimizer is token-level: each replay record is split into decision
//! tokens, per-token rewards carry a KL penalty against a frozen reference
//! policy with the tree credit added at the final token, advantages come
//! from generalized advantage estimation, and the clipped surrogate is
//! summed across all agents' records.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::agent::{AgentError, Question};
use crate::credit::ReplayRecord;
use crate::env::tokenize;
use crate::policy::{Policy, PolicyError, Sampled};
use crate::rollout::{build_tree, RolloutConfig};
use crate::env::EnvironmentBackends;

// ---------------------------------------------------------------------------
// configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    /// KL-penalty coefficient against the frozen reference policy.
    pub kl_beta: f64,
    pub policy_lr: f64,
    pub value_lr: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 1.0,
            lambda: 1.0,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            kl_beta: 0.005,
            // scaled up from LLM-size defaults for the small linear models
            policy_lr: 0.05,
            value_lr: 0.1,
        }
    }
}

// ---------------------------------------------------------------------------
// advantage estimation

/// TD residuals: `delta_m = r_m + gamma * V_{m+1} - V_m`, with the value of
/// the post-terminal state fixed at zero.
pub fn token_deltas(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    let m = rewards.len();
    (0..m)
        .map(|i| {
            let next_v = if i + 1 < m { values[i + 1] } else { 0.0 };
            rewards[i] + gamma * next_v - values[i]
        })
        .collect()
}

/// Generalized advantage estimation by the backward recursion
/// `A_m = delta_m + gamma * lambda * A_{m+1}`.
pub fn gae(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let mut out = vec![0.0; deltas.len()];
    let mut acc = 0.0;
    for i in (0..deltas.len()).rev() {
        acc = deltas[i] + gamma * lambda * acc;
        out[i] = acc;
    }
    out
}

/// Per-token rewards for one record: a KL penalty toward the reference
/// policy at every token, and the scalar credit added at the last token.
pub fn token_rewards(
    old_logprobs: &[f64],
    ref_logprobs: &[f64],
    kl_beta: f64,
    credit: f64,
) -> Vec<f64> {
    assert_eq!(old_logprobs.len(), ref_logprobs.len());
    let m = old_logprobs.len();
    let mut out: Vec<f64> = old_logprobs
        .iter()
        .zip(ref_logprobs)
        .map(|(o, r)| -kl_beta * (o - r))
        .collect();
    if m > 0 {
        out[m - 1] += credit;
    }
    out
}

// ---------------------------------------------------------------------------
// trainable interfaces

pub type SparseGrad = Vec<(usize, f64)>;

/// A policy whose per-token log-probabilities have analytic parameter
/// gradients.
pub trait TrainablePolicy: Policy {
    /// Gradient of each token's log-probability with respect to the flat
    /// parameter vector, sparse, aligned with `logprobs`.
    fn logprob_grads(&self, prompt: &str, action: &str) -> Result<Vec<SparseGrad>, PolicyError>;
}

/// Linear state-value model over prompt/position features.
pub trait ValueModel {
    fn value(&self, prompt: &str, position: usize) -> f64;
    /// Sparse feature vector; the value is its dot product with params.
    fn features(&self, prompt: &str, position: usize) -> SparseGrad;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
}

// ---------------------------------------------------------------------------
// batch preparation and losses

/// A replay record with everything precomputed that must stay fixed while
/// differentiating the surrogate: rewards, advantages, and returns.
#[derive(Debug, Clone)]
pub struct PreparedRecord {
    pub record: ReplayRecord,
    pub ref_logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub fn prepare_record(
    record: &ReplayRecord,
    reference: &dyn Policy,
    value: &dyn ValueModel,
    cfg: &PpoConfig,
) -> Result<PreparedRecord, PolicyError> {
    let ref_logprobs = reference.logprobs(&record.prompt_text, &record.action_text)?;
    if ref_logprobs.len() != record.old_logprobs.len() {
        return Err(PolicyError::UnscorableAction {
            action: record.action_text.clone(),
            reason: "reference tokenization disagrees with sampled logprobs".into(),
        });
    }
    let rewards = token_rewards(&record.old_logprobs, &ref_logprobs, cfg.kl_beta, record.credit);
    let values: Vec<f64> = (0..rewards.len())
        .map(|m| value.value(&record.prompt_text, m))
        .collect();
    let deltas = token_deltas(&rewards, &values, cfg.gamma);
    let advantages = gae(&deltas, cfg.gamma, cfg.lambda);
    let returns: Vec<f64> = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
    Ok(PreparedRecord {
        record: record.clone(),
        ref_logprobs,
        rewards,
        advantages,
        returns,
    })
}

pub fn prepare_batch(
    records: &[ReplayRecord],
    reference: &dyn Policy,
    value: &dyn ValueModel,
    cfg: &PpoConfig,
) -> Result<Vec<PreparedRecord>, PolicyError> {
    records
        .iter()
        .map(|r| prepare_record(r, reference, value, cfg))
        .collect()
}

/// Shifts and scales every advantage in the batch to zero mean and unit
/// variance. Keeps the update magnitude independent of the raw credit scale.
pub fn normalize_advantages(batch: &mut [PreparedRecord]) {
    let all: Vec<f64> = batch
        .iter()
        .flat_map(|b| b.advantages.iter().copied())
        .collect();
    if all.is_empty() {
        return;
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-8);
    for rec in batch.iter_mut() {
        for a in rec.advantages.iter_mut() {
            *a = (*a - mean) / std;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    pub token_count: usize,
}

/// Combined clipped-surrogate plus value loss, averaged over all tokens of
/// all records in the batch. Advantages and returns come precomputed from
/// `PreparedRecord` so the loss is an ordinary function of the parameters.
pub fn combined_loss(
    policy: &dyn Policy,
    value: &dyn ValueModel,
    batch: &[PreparedRecord],
    cfg: &PpoConfig,
) -> Result<LossReport, PolicyError> {
    let mut policy_loss = 0.0;
    let mut value_loss = 0.0;
    let mut clipped = 0usize;
    let mut approx_kl = 0.0;
    let mut n_tokens = 0usize;
    for p in batch {
        let new_lp = policy.logprobs(&p.record.prompt_text, &p.record.action_text)?;
        assert_eq!(new_lp.len(), p.record.old_logprobs.len());
        for m in 0..new_lp.len() {
            let ratio = (new_lp[m] - p.record.old_logprobs[m]).exp();
            let adv = p.advantages[m];
            let unclipped = ratio * adv;
            let clamped = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * adv;
            policy_loss -= unclipped.min(clamped);
            if clamped < unclipped {
                clipped += 1;
            }
            approx_kl += p.record.old_logprobs[m] - new_lp[m];
            let v = value.value(&p.record.prompt_text, m);
            let err = v - p.returns[m];
            value_loss += err * err;
            n_tokens += 1;
        }
    }
    let n = n_tokens.max(1) as f64;
    let policy_loss = policy_loss / n;
    let value_loss = cfg.value_coef * value_loss / n;
    Ok(LossReport {
        total: policy_loss + value_loss,
        policy_loss,
        value_loss,
        clip_fraction: clipped as f64 / n,
        approx_kl: approx_kl / n,
        token_count: n_tokens,
    })
}

/// Analytic gradient of `combined_loss` with respect to the policy and
/// value parameter vectors.
pub fn combined_grad(
    policy: &dyn TrainablePolicy,
    value: &dyn ValueModel,
    batch: &[PreparedRecord],
    cfg: &PpoConfig,
) -> Result<(Vec<f64>, Vec<f64>), PolicyError> {
    let mut g_policy = vec![0.0; policy.params().len()];
    let mut g_value = vec![0.0; value.params().len()];
    let n_tokens: usize = batch.iter().map(|p| p.record.old_logprobs.len()).sum();
    let n = n_tokens.max(1) as f64;
    for p in batch {
        let new_lp = policy.logprobs(&p.record.prompt_text, &p.record.action_text)?;
        let grads = policy.logprob_grads(&p.record.prompt_text, &p.record.action_text)?;
        for m in 0..new_lp.len() {
            let ratio = (new_lp[m] - p.record.old_logprobs[m]).exp();
            let adv = p.advantages[m];
            // the min switches to the clipped branch exactly when the ratio
            // has left the trust band in the direction the advantage pushes
            let clipped_out = (ratio > 1.0 + cfg.clip_epsilon && adv > 0.0)
                || (ratio < 1.0 - cfg.clip_epsilon && adv < 0.0);
            if !clipped_out {
                let scale = -adv * ratio / n;
                for &(idx, v) in &grads[m] {
                    g_policy[idx] += scale * v;
                }
            }
            let v = value.value(&p.record.prompt_text, m);
            let scale = cfg.value_coef * 2.0 * (v - p.returns[m]) / n;
            for &(idx, fv) in &value.features(&p.record.prompt_text, m) {
                g_value[idx] += scale * fv;
            }
        }
    }
    Ok((g_policy, g_value))
}

/// One SGD step over a prepared batch; returns the pre-update loss report.
pub fn train_step(
    policy: &mut dyn TrainablePolicy,
    value: &mut dyn ValueModel,
    batch: &[PreparedRecord],
    cfg: &PpoConfig,
) -> Result<LossReport, PolicyError> {
    let report = combined_loss(policy, value, batch, cfg)?;
    let (g_p, g_v) = combined_grad(policy, value, batch, cfg)?;
    let mut params = policy.params();
    for (p, g) in params.iter_mut().zip(&g_p) {
        *p -= cfg.policy_lr * g;
    }
    policy.set_params(&params);
    let mut vparams = value.params();
    for (p, g) in vparams.iter_mut().zip(&g_v) {
        *p -= cfg.value_lr * g;
    }
    value.set_params(&vparams);
    Ok(report)
}

// ---------------------------------------------------------------------------
// supervised warm-up

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupStep {
    pub prompt_text: String,
    pub action_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmupSolution {
    pub question_id: String,
    pub steps: Vec<WarmupStep>,
}

/// Rejection sampling for supervised warm-up: rolls out up to `attempts`
/// trees per question and keeps the sampled decisions along each distinct
/// successful root-to-leaf path, at most `max_solutions` per question.
pub fn collect_warmup(
    questions: &[Question],
    policy: &dyn Policy,
    env: &EnvironmentBackends,
    rollout_cfg: &RolloutConfig,
    max_solutions: usize,
    attempts: usize,
) -> Result<Vec<WarmupSolution>, crate::orchestrator::OrchestratorError> {
    use crate::rollout::{NodePayload, ParsedOutcome};
    let mut out = Vec::new();
    for q in questions {
        let mut seen: Vec<Vec<String>> = Vec::new();
        'attempts: for attempt in 0..attempts.max(1) {
        let mut cfg = rollout_cfg.clone();
        cfg.seed = rollout_cfg.seed.wrapping_add(attempt as u64);
        let tree = build_tree(q, policy, env, &cfg)?;
        for leaf in tree.nodes.iter().filter(|n| n.reward() == Some(1.0)) {
            if seen.len() >= max_solutions {
                break 'attempts;
            }
            // walk back to the root collecting sampled decisions
            let mut path = Vec::new();
            let mut cur = Some(leaf.id);
            while let Some(id) = cur {
                path.push(id);
                cur = tree.nodes[id].parent;
            }
            path.reverse();
            let mut steps = Vec::new();
            let mut key = Vec::new();
            for id in path {
                if let NodePayload::Action {
                    forced,
                    prompt_text,
                    action_raw,
                    action_parsed: ParsedOutcome::Action(_) | ParsedOutcome::ForcedRetrievalPrefix,
                    old_logprobs,
                    ..
                } = &tree.nodes[id].payload
                {
                    if *forced && old_logprobs.is_empty() {
                        continue;
                    }
                    steps.push(WarmupStep {
                        prompt_text: prompt_text.clone(),
                        action_text: action_raw.clone(),
                    });
                    key.push(action_raw.clone());
                }
            }
            if steps.is_empty() || seen.contains(&key) {
                continue;
            }
            seen.push(key);
            out.push(WarmupSolution {
                question_id: q.id.clone(),
                steps,
            });
        }
        }
    }
    Ok(out)
}

/// One behavior-cloning step: gradient ascent on the mean token
/// log-likelihood of the warm-up solutions. Returns the pre-update mean
/// log-likelihood.
pub fn bc_step(
    policy: &mut dyn TrainablePolicy,
    solutions: &[WarmupSolution],
    lr: f64,
) -> Result<f64, PolicyError> {
    let mut grad = vec![0.0; policy.params().len()];
    let mut total_lp = 0.0;
    let mut n_tokens = 0usize;
    for s in solutions {
        for step in &s.steps {
            let lps = policy.logprobs(&step.prompt_text, &step.action_text)?;
            let gs = policy.logprob_grads(&step.prompt_text, &step.action_text)?;
            for (lp, g) in lps.iter().zip(&gs) {
                total_lp += lp;
                for &(idx, v) in g {
                    grad[idx] += v;
                }
                n_tokens += 1;
            }
        }
    }
    let n = n_tokens.max(1) as f64;
    let mut params = policy.params();
    for (p, g) in params.iter_mut().zip(&grad) {
        *p += lr * g / n;
    }
    policy.set_params(&params);
    Ok(total_lp / n)
}

// ---------------------------------------------------------------------------
// prompt introspection for the toy models

/// Structured view of a rendered prompt, recovered from its text. The toy
/// policy and value model observe nothing else.
#[derive(Debug, Clone, PartialEq)]
pub enum PromptView {
    Router {
        question: String,
        /// True when the prompt ends with the forced `[Retrieval] ` prefix
        /// and only a query continuation is expected.
        forced_retrieval: bool,
    },
    Filter {
        question: String,
        objective: Option<String>,
        docs: Vec<(String, String)>,
    },
    Decision {
        question: String,
        roadmap: String,
        docs: Vec<(String, String)>,
    },
}

const FORCED_SUFFIX: &str = "\n[Retrieval] ";

fn parse_doc_lines(block: &str) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for line in block.lines() {
        let Some(rest) = line.strip_prefix('[') else { continue };
        let Some(close) = rest.find("] ") else { continue };
        let body_part = &rest[close + 2..];
        match body_part.split_once(": ") {
            Some((title, body)) => out.push((title.to_string(), body.to_string())),
            None => out.push((body_part.to_string(), String::new())),
        }
    }
    out
}

impl PromptView {
    pub fn parse(prompt: &str) -> Result<PromptView, PolicyError> {
        let unknown = || PolicyError::UnknownPrompt(prompt.chars().take(60).collect());
        if let Some(pos) = prompt.find("Existing Documents: ") {
            let tail = &prompt[pos + "Existing Documents: ".len()..];
            let (docs_block, rest) = tail.split_once("\n\nRoadmap: ").ok_or_else(unknown)?;
            let (roadmap, question) = rest.split_once("\n\nQuestion: ").ok_or_else(unknown)?;
            let docs = if docs_block.trim() == "(none)" {
                Vec::new()
            } else {
                parse_doc_lines(docs_block)
            };
            return Ok(PromptView::Decision {
                question: question.trim().to_string(),
                roadmap: roadmap.to_string(),
                docs,
            });
        }
        if let Some(pos) = prompt.find("\nDocuments:\n") {
            let docs = parse_doc_lines(&prompt[pos + "\nDocuments:\n".len()..]);
            let head = &prompt[..pos];
            let marker = "Now, process the following question:\n\n";
            let tail = &head[head.find(marker).ok_or_else(unknown)? + marker.len()..];
            let (objective, tail) = match tail.strip_prefix("Current step's objectives: ") {
                Some(rest) => {
                    let (obj, rest) = rest.split_once("\n\n").ok_or_else(unknown)?;
                    (Some(obj.to_string()), rest)
                }
                None => (None, tail),
            };
            let question = tail
                .strip_prefix("Question: ")
                .ok_or_else(unknown)?
                .trim_end_matches('\n')
                .to_string();
            return Ok(PromptView::Filter {
                question,
                objective,
                docs,
            });
        }
        if prompt.contains("[No Retrieval]") {
            let (body, forced) = match prompt.strip_suffix(FORCED_SUFFIX) {
                Some(b) => (b, true),
                None => (prompt, false),
            };
            let pos = body.rfind("\nQuestion: ").ok_or_else(unknown)?;
            let question = body[pos + "\nQuestion: ".len()..].trim().to_string();
            return Ok(PromptView::Router {
                question,
                forced_retrieval: forced,
            });
        }
        Err(unknown())
    }

    pub fn question(&self) -> &str {
        match self {
            PromptView::Router { question, .. }
            | PromptView::Filter { question, .. }
            | PromptView::Decision { question, .. } => question,
        }
    }
}

// ---------------------------------------------------------------------------
// feature machinery

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn overlap_fraction(needle: &str, haystack: &str) -> f64 {
    let n: std::collections::BTreeSet<String> = tokenize(needle).into_iter().collect();
    if n.is_empty() {
        return 0.0;
    }
    let h: std::collections::BTreeSet<String> = tokenize(haystack).into_iter().collect();
    n.iter().filter(|t| h.contains(*t)).count() as f64 / n.len() as f64
}

/// Maximal runs of two or more capitalized words: the entity-name shape the
/// synthetic corpus uses. Sentence-leading single capitals are excluded by
/// the length requirement.
fn capitalized_runs(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: Vec<&str> = Vec::new();
    for word in text.split(|c: char| c.is_whitespace()) {
        let w = word.trim_matches(|c: char| !c.is_alphanumeric());
        if !w.is_empty() && w.chars().next().unwrap().is_uppercase() {
            run.push(w);
        } else {
            if run.len() >= 2 {
                out.push(run.join(" "));
            }
            run.clear();
        }
    }
    if run.len() >= 2 {
        out.push(run.join(" "));
    }
    out
}

/// The attribute phrase of a "What is the X of ..." question, if present.
fn question_attribute(question: &str) -> Option<String> {
    let rest = question.strip_prefix("What is the ")?;
    let end = rest.find(" of ")?;
    Some(rest[..end].to_string())
}

#[derive(Debug, Clone)]
struct QueryCandidate {
    text: String,
    is_question: bool,
    is_roadmap_step: bool,
    is_chained: bool,
    /// For chained candidates, the entity name spliced into the query.
    entity: Option<String>,
}

const MAX_QUERY_CANDIDATES: usize = 10;

/// Query candidates visible in a prompt: the question itself, the roadmap
/// steps, and attribute queries chained onto entity names that appear in
/// the accumulated documents but not in the question.
fn query_candidates(
    question: &str,
    roadmap: Option<&str>,
    docs: &[(String, String)],
) -> Vec<QueryCandidate> {
    let mut out = vec![QueryCandidate {
        text: question.trim().to_string(),
        is_question: true,
        is_roadmap_step: false,
        is_chained: false,
        entity: None,
    }];
    let push = |c: QueryCandidate, out: &mut Vec<QueryCandidate>| {
        if out.len() < MAX_QUERY_CANDIDATES && !out.iter().any(|e| e.text == c.text) {
            out.push(c);
        }
    };
    if let Some(roadmap) = roadmap {
        for line in roadmap.lines() {
            let step = match line.split_once(':') {
                Some((head, rest)) if head.trim_start().starts_with("Step") => rest.trim(),
                _ => line.trim(),
            };
            if step.is_empty() {
                continue;
            }
            push(
                QueryCandidate {
                    text: step.to_string(),
                    is_question: false,
                    is_roadmap_step: true,
                    is_chained: false,
                    entity: None,
                },
                &mut out,
            );
        }
    }
    if let Some(attr) = question_attribute(question) {
        for (_, body) in docs {
            for entity in capitalized_runs(body) {
                // entity strings live in the body; the title repeats them
                if question.contains(&entity) {
                    continue;
                }
                push(
                    QueryCandidate {
                        text: format!("{attr} of {entity}"),
                        is_question: false,
                        is_roadmap_step: false,
                        is_chained: true,
                        entity: Some(entity),
                    },
                    &mut out,
                );
            }
        }
    }
    out
}

// parameter layout: [router | query | decision | filter]
const ROUTER_HASH_D: usize = 32;
const ROUTER_BLOCK: usize = ROUTER_HASH_D + 1; // + bias
const ROUTER_OFF: usize = 0;
const ROUTER_LEN: usize = 3 * ROUTER_BLOCK;
const QUERY_OFF: usize = ROUTER_OFF + ROUTER_LEN;
const QUERY_F: usize = 9;
const DEC_OFF: usize = QUERY_OFF + QUERY_F;
const DEC_F: usize = 5;
const DEC_LEN: usize = 2 * DEC_F;
const FILT_OFF: usize = DEC_OFF + DEC_LEN;
const FILT_F: usize = 6;
pub const TOY_POLICY_PARAMS: usize = FILT_OFF + FILT_F;

fn router_features(strategy: usize, question: &str) -> SparseGrad {
    let base = ROUTER_OFF + strategy * ROUTER_BLOCK;
    let mut out = vec![(base, 1.0)];
    let tokens: std::collections::BTreeSet<String> = tokenize(question).into_iter().collect();
    if tokens.is_empty() {
        return out;
    }
    let scale = 1.0 / (tokens.len() as f64).sqrt();
    let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
    for t in &tokens {
        let idx = base + 1 + (fnv1a(t) as usize % ROUTER_HASH_D);
        *acc.entry(idx).or_insert(0.0) += scale;
    }
    out.extend(acc);
    out
}

fn query_features(
    cand: &QueryCandidate,
    question: &str,
    docs: &[(String, String)],
) -> SparseGrad {
    let doc_text = docs
        .iter()
        .map(|(t, b)| format!("{t} {b}"))
        .collect::<Vec<_>>()
        .join(" ");
    let redundancy = docs
        .iter()
        .map(|(t, _)| overlap_fraction(&cand.text, t))
        .fold(0.0f64, f64::max);
    // fraction of candidate tokens grounded in the documents but absent
    // from the question: the chaining signal
    let q_tokens: std::collections::BTreeSet<String> = tokenize(question).into_iter().collect();
    let d_tokens: std::collections::BTreeSet<String> = tokenize(&doc_text).into_iter().collect();
    let c_tokens = tokenize(&cand.text);
    let grounded_new = if c_tokens.is_empty() {
        0.0
    } else {
        c_tokens
            .iter()
            .filter(|t| d_tokens.contains(*t) && !q_tokens.contains(*t))
            .count() as f64
            / c_tokens.len() as f64
    };
    // how strongly the chained entity's source document ties back to the
    // question: separates the bridging entity from bystander entities
    let source_overlap = cand
        .entity
        .as_deref()
        .map(|e| {
            docs.iter()
                .filter(|(_, b)| b.contains(e))
                .map(|(t, b)| overlap_fraction(question, &format!("{t} {b}")))
                .fold(0.0f64, f64::max)
        })
        .unwrap_or(0.0);
    vec![
        (QUERY_OFF, 1.0),
        (QUERY_OFF + 1, overlap_fraction(&cand.text, question)),
        (QUERY_OFF + 2, cand.is_question as u8 as f64),
        (QUERY_OFF + 3, cand.is_roadmap_step as u8 as f64),
        (QUERY_OFF + 4, redundancy),
        (QUERY_OFF + 5, cand.is_chained as u8 as f64),
        (QUERY_OFF + 6, grounded_new),
        (QUERY_OFF + 7, (c_tokens.len() as f64 / 10.0).min(1.0)),
        (QUERY_OFF + 8, source_overlap),
    ]
}

/// Roadmap coverage: for each step, the best overlap between the step text
/// and any accumulated document.
fn roadmap_coverage(roadmap: &str, docs: &[(String, String)]) -> (f64, bool) {
    let mut fractions = Vec::new();
    for line in roadmap.lines() {
        let step = match line.split_once(':') {
            Some((head, rest)) if head.trim_start().starts_with("Step") => rest.trim(),
            _ => line.trim(),
        };
        if step.is_empty() {
            continue;
        }
        let best = docs
            .iter()
            .map(|(t, b)| overlap_fraction(step, &format!("{t} {b}")))
            .fold(0.0f64, f64::max);
        fractions.push(best);
    }
    if fractions.is_empty() {
        return (0.0, false);
    }
    let covered = fractions.iter().filter(|f| **f >= 0.5).count();
    let frac = covered as f64 / fractions.len() as f64;
    (frac, covered < fractions.len())
}

fn decision_features(class: usize, roadmap: &str, docs: &[(String, String)]) -> SparseGrad {
    let (coverage, uncovered) = roadmap_coverage(roadmap, docs);
    let base = DEC_OFF + class * DEC_F;
    vec![
        (base, 1.0),
        (base + 1, coverage),
        (base + 2, (!docs.is_empty()) as u8 as f64),
        (base + 3, (docs.len() as f64 / 5.0).min(1.0)),
        (base + 4, uncovered as u8 as f64),
    ]
}

fn filter_features(
    doc: &(String, String),
    rank: usize,
    n_docs: usize,
    target: &str,
    question: &str,
) -> SparseGrad {
    let full = format!("{} {}", doc.0, doc.1);
    let title_covered = {
        let t: std::collections::BTreeSet<String> = tokenize(&doc.0).into_iter().collect();
        let tgt: std::collections::BTreeSet<String> = tokenize(target).into_iter().collect();
        !t.is_empty() && t.iter().all(|x| tgt.contains(x))
    };
    vec![
        (FILT_OFF, 1.0),
        (FILT_OFF + 1, overlap_fraction(target, &full)),
        (FILT_OFF + 2, overlap_fraction(&doc.0, target)),
        (FILT_OFF + 3, overlap_fraction(question, &full)),
        (FILT_OFF + 4, rank as f64 / n_docs.max(1) as f64),
        (FILT_OFF + 5, title_covered as u8 as f64),
    ]
}

// ---------------------------------------------------------------------------
// toy softmax policy


/// Reborrows an optional rng with a fresh, shorter lifetime.
fn reborrow<'a>(o: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    o.as_mut().map(|r| &mut **r as &mut dyn RngCore)
}

const STOP_TEXT: &str = "Thought: the accumulated documents look sufficient\nAction: [LLM]";
const CONTINUE_PREFIX: &str = "Thought: more evidence is needed\nAction: [Retrieval] ";
const FILTER_THOUGHT: &str = "reviewing retrieved documents";
const BRACKETS: [&str; 3] = ["[No Retrieval]", "[Retrieval]", "[Planning]"];

/// One decision token: its emitted text, log-probability, and gradient.
#[derive(Debug, Clone)]
struct TokenChoice {
    text: String,
    logprob: f64,
    grad: SparseGrad,
    feats: Vec<SparseGrad>,
    chosen: usize,
}

/// Softmax over explicit candidate actions with linear scores on hashed and
/// handcrafted features. Covers all three agents from a single flat
/// parameter vector; zero parameters give uniform behavior.
#[derive(Debug, Serialize, Deserialize)]
pub struct ToySoftmaxPolicy {
    params: Vec<f64>,
    /// Candidate features per (prompt, action) are parameter-independent;
    /// memoizing them makes repeated scoring of a replay batch cheap.
    #[serde(skip)]
    plan_cache: Mutex<HashMap<(String, String), Arc<Vec<PlannedToken>>>>,
}

impl Clone for ToySoftmaxPolicy {
    fn clone(&self) -> Self {
        // the cache is a pure memo; clones start empty
        ToySoftmaxPolicy {
            params: self.params.clone(),
            plan_cache: Mutex::new(HashMap::new()),
        }
    }
}

impl PartialEq for ToySoftmaxPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.params == other.params
    }
}

impl Default for ToySoftmaxPolicy {
    fn default() -> Self {
        ToySoftmaxPolicy {
            params: vec![0.0; TOY_POLICY_PARAMS],
            plan_cache: Mutex::new(HashMap::new()),
        }
    }
}

/// Parameter-independent decode plan for one token: the candidate feature
/// sets and which candidate the forced action selected.
#[derive(Debug, Clone)]
struct PlannedToken {
    feats: Vec<SparseGrad>,
    chosen: usize,
}

/// Log-softmax of `scores / temperature`; temperature 0 puts all mass on
/// the first argmax.
fn log_softmax(scores: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 0.0 {
        let best = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        return scores
            .iter()
            .enumerate()
            .map(|(i, _)| if i == best { 0.0 } else { f64::NEG_INFINITY })
            .collect();
    }
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + scaled.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    scaled.iter().map(|s| s - log_z).collect()
}

fn sample_index(log_probs: &[f64], rng: &mut dyn RngCore) -> usize {
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

impl ToySoftmaxPolicy {
    fn dot(&self, features: &SparseGrad) -> f64 {
        features.iter().map(|&(i, v)| self.params[i] * v).sum()
    }

    /// Softmax gradient of the chosen candidate's log-probability:
    /// `phi(chosen) - E_p[phi]`.
    fn softmax_grad(feature_sets: &[SparseGrad], log_probs: &[f64], chosen: usize) -> SparseGrad {
        let mut acc: std::collections::BTreeMap<usize, f64> = std::collections::BTreeMap::new();
        for &(i, v) in &feature_sets[chosen] {
            *acc.entry(i).or_insert(0.0) += v;
        }
        for (fs, lp) in feature_sets.iter().zip(log_probs) {
            let p = lp.exp();
            for &(i, v) in fs {
                *acc.entry(i).or_insert(0.0) -= p * v;
            }
        }
        acc.into_iter().filter(|(_, v)| *v != 0.0).collect()
    }

    /// Picks (or force-decodes) one candidate. `forced` is matched by text.
    fn choose(
        &self,
        cands: &[String],
        feature_sets: Vec<SparseGrad>,
        temperature: f64,
        rng: Option<&mut dyn RngCore>,
        forced: Option<&str>,
    ) -> Result<TokenChoice, PolicyError> {
        let scores: Vec<f64> = feature_sets.iter().map(|f| self.dot(f)).collect();
        // gradients and scored log-probs always use the untempered softmax
        let lps = log_softmax(&scores, 1.0);
        let chosen = match forced {
            Some(text) => cands.iter().position(|c| c == text).ok_or_else(|| {
                PolicyError::UnscorableAction {
                    action: text.to_string(),
                    reason: "no candidate matches".into(),
                }
            })?,
            None => {
                let sampling_lps = if temperature == 1.0 {
                    lps.clone()
                } else {
                    log_softmax(&scores, temperature)
                };
                match rng {
                    Some(rng) => sample_index(&sampling_lps, rng),
                    None => unreachable!("sampling requires an rng"),
                }
            }
        };
        Ok(TokenChoice {
            text: cands[chosen].clone(),
            logprob: lps[chosen],
            grad: Self::softmax_grad(&feature_sets, &lps, chosen),
            feats: feature_sets,
            chosen,
        })
    }

    /// The single shared decode path: samples when `forced_action` is None,
    /// otherwise re-scores the given action text token by token.
    fn decode(
        &self,
        prompt: &str,
        forced_action: Option<&str>,
        temperature: f64,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Vec<TokenChoice>, PolicyError> {
        let view = PromptView::parse(prompt)?;
        let mut tokens = Vec::new();
        match &view {
            PromptView::Router {
                question,
                forced_retrieval,
            } => {
                let cands = query_candidates(question, None, &[]);
                if *forced_retrieval {
                    // only the query continuation is sampled
                    let texts: Vec<String> =
                        cands.iter().map(|c| format!("`{}`", c.text)).collect();
                    let feats: Vec<SparseGrad> = cands
                        .iter()
                        .map(|c| query_features(c, question, &[]))
                        .collect();
                    tokens.push(self.choose(
                        &texts,
                        feats,
                        temperature,
                        reborrow(&mut rng),
                        forced_action,
                    )?);
                    return Ok(tokens);
                }
                let bracket_cands: Vec<String> = BRACKETS.iter().map(|s| s.to_string()).collect();
                let bracket_feats: Vec<SparseGrad> =
                    (0..3).map(|s| router_features(s, question)).collect();
                let forced_bracket = forced_action.map(|a| {
                    // longest-match so "[No Retrieval]" is not read as a
                    // malformed "[Retrieval]"
                    if a.starts_with("[No Retrieval]") {
                        "[No Retrieval]"
                    } else if a.starts_with("[Planning]") {
                        "[Planning]"
                    } else {
                        "[Retrieval]"
                    }
                });
                let bracket = self.choose(
                    &bracket_cands,
                    bracket_feats,
                    temperature,
                    reborrow(&mut rng),
                    forced_bracket,
                )?;
                let retrieval = bracket.text == "[Retrieval]";
                tokens.push(bracket);
                // a bare "[Retrieval]" is the forced bracket prefix: only
                // the strategy token is scored
                if forced_action == Some("[Retrieval]") {
                    return Ok(tokens);
                }
                if retrieval {
                    let texts: Vec<String> =
                        cands.iter().map(|c| format!(" `{}`", c.text)).collect();
                    let feats: Vec<SparseGrad> = cands
                        .iter()
                        .map(|c| query_features(c, question, &[]))
                        .collect();
                    let forced_query = forced_action
                        .map(|a| {
                            a.strip_prefix("[Retrieval]").ok_or_else(|| {
                                PolicyError::UnscorableAction {
                                    action: a.to_string(),
                                    reason: "bracket/continuation mismatch".into(),
                                }
                            })
                        })
                        .transpose()?;
                    tokens.push(self.choose(
                        &texts,
                        feats,
                        temperature,
                        reborrow(&mut rng),
                        forced_query,
                    )?);
                }
            }
            PromptView::Decision {
                question,
                roadmap,
                docs,
            } => {
                let head_cands = vec![STOP_TEXT.to_string(), CONTINUE_PREFIX.to_string()];
                let head_feats = vec![
                    decision_features(0, roadmap, docs),
                    decision_features(1, roadmap, docs),
                ];
                let forced_head = forced_action
                    .map(|a| {
                        if a == STOP_TEXT {
                            Ok(STOP_TEXT)
                        } else if a.starts_with(CONTINUE_PREFIX) {
                            Ok(CONTINUE_PREFIX)
                        } else {
                            Err(PolicyError::UnscorableAction {
                                action: a.to_string(),
                                reason: "unknown decision head".into(),
                            })
                        }
                    })
                    .transpose()?;
                let head = self.choose(
                    &head_cands,
                    head_feats,
                    temperature,
                    reborrow(&mut rng),
                    forced_head,
                )?;
                let cont = head.text == CONTINUE_PREFIX;
                tokens.push(head);
                if cont {
                    let cands = query_candidates(question, Some(roadmap), docs);
                    let texts: Vec<String> =
                        cands.iter().map(|c| format!("`{}`", c.text)).collect();
                    let feats: Vec<SparseGrad> = cands
                        .iter()
                        .map(|c| query_features(c, question, docs))
                        .collect();
                    let forced_query = forced_action
                        .map(|a| {
                            a.strip_prefix(CONTINUE_PREFIX).ok_or_else(|| {
                                PolicyError::UnscorableAction {
                                    action: a.to_string(),
                                    reason: "head/continuation mismatch".into(),
                                }
                            })
                        })
                        .transpose()?;
                    tokens.push(self.choose(
                        &texts,
                        feats,
                        temperature,
                        reborrow(&mut rng),
                        forced_query,
                    )?);
                }
            }
            PromptView::Filter {
                question,
                objective,
                docs,
            } => {
                let n = docs.len();
                if n == 0 {
                    tokens.push(TokenChoice {
                        text: format!("Thought: {FILTER_THOUGHT}\nAction: []"),
                        logprob: 0.0,
                        grad: Vec::new(),
                        feats: Vec::new(),
                        chosen: 0,
                    });
                    if let Some(a) = forced_action {
                        if a != tokens[0].text {
                            return Err(PolicyError::UnscorableAction {
                                action: a.to_string(),
                                reason: "empty-document filter action mismatch".into(),
                            });
                        }
                    }
                    return Ok(tokens);
                }
                let target = objective.as_deref().unwrap_or(question);
                // force-decoding recovers the keep set from the action text
                let forced_keeps: Option<Vec<bool>> = forced_action
                    .map(|a| {
                        let valid: Vec<String> = (0..n).map(|i| i.to_string()).collect();
                        let parsed = crate::agent::parse_filter_action(a, &valid)
                            .map_err(|e: AgentError| PolicyError::UnscorableAction {
                                action: a.to_string(),
                                reason: e.to_string(),
                            })?;
                        let mut keeps = vec![false; n];
                        for id in &parsed.selected_ids {
                            keeps[id.parse::<usize>().unwrap()] = true;
                        }
                        Ok::<_, PolicyError>(keeps)
                    })
                    .transpose()?;
                // one keep/drop token per document; the id-list text is
                // distributed across the tokens so concatenation rebuilds
                // the canonical action string
                let mut kept_any = false;
                let mut raw = Vec::with_capacity(n);
                for j in 0..n {
                    let keep_feats = filter_features(&docs[j], j, n, target, question);
                    let feats = vec![keep_feats, Vec::new()]; // drop scores 0
                    let cands = vec!["keep".to_string(), "drop".to_string()];
                    let forced = forced_keeps
                        .as_ref()
                        .map(|k| if k[j] { "keep" } else { "drop" });
                    let choice = self.choose(
                        &cands,
                        feats,
                        temperature,
                        reborrow(&mut rng),
                        forced,
                    )?;
                    raw.push(choice);
                }
                for (j, choice) in raw.into_iter().enumerate() {
                    let keep = choice.text == "keep";
                    let mut text = String::new();
                    if j == 0 {
                        text.push_str(&format!("Thought: {FILTER_THOUGHT}\nAction: ["));
                    }
                    if keep {
                        if kept_any {
                            text.push_str(", ");
                        }
                        text.push_str(&j.to_string());
                        kept_any = true;
                    }
                    if j == n - 1 {
                        text.push(']');
                    }
                    tokens.push(TokenChoice {
                        text,
                        logprob: choice.logprob,
                        grad: choice.grad,
                        feats: choice.feats,
                        chosen: choice.chosen,
                    });
                }
                if let Some(a) = forced_action {
                    let rebuilt: String =
                        tokens.iter().map(|t| t.text.as_str()).collect();
                    if rebuilt != a {
                        return Err(PolicyError::UnscorableAction {
                            action: a.to_string(),
                            reason: "filter action text is not in canonical form".into(),
                        });
                    }
                }
            }
        }
        Ok(tokens)
    }

    /// Memoized parameter-independent decode plan for a forced action.
    fn plan(&self, prompt: &str, action: &str) -> Result<Arc<Vec<PlannedToken>>, PolicyError> {
        let key = (prompt.to_string(), action.to_string());
        if let Some(p) = self.plan_cache.lock().unwrap().get(&key) {
            return Ok(Arc::clone(p));
        }
        let tokens = self.decode(prompt, Some(action), 1.0, None)?;
        let plan: Arc<Vec<PlannedToken>> = Arc::new(
            tokens
                .into_iter()
                .map(|t| PlannedToken {
                    feats: t.feats,
                    chosen: t.chosen,
                })
                .collect(),
        );
        let mut cache = self.plan_cache.lock().unwrap();
        if cache.len() >= 8192 {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&plan));
        Ok(plan)
    }

    /// Scores a plan under the current parameters.
    fn score_plan(&self, plan: &[PlannedToken]) -> Vec<(f64, SparseGrad)> {
        plan.iter()
            .map(|t| {
                if t.feats.is_empty() {
                    return (0.0, Vec::new());
                }
                let scores: Vec<f64> = t.feats.iter().map(|f| self.dot(f)).collect();
                let lps = log_softmax(&scores, 1.0);
                (lps[t.chosen], Self::softmax_grad(&t.feats, &lps, t.chosen))
            })
            .collect()
    }
}

impl Policy for ToySoftmaxPolicy {
    fn sample(&self, prompt: &str, temperature: f64, rng: &mut dyn RngCore) -> Sampled {
        let tokens = self
            .decode(prompt, None, temperature, Some(rng))
            .expect("toy policy can decode every rendered prompt");
        Sampled {
            text: tokens.iter().map(|t| t.text.as_str()).collect(),
            logprobs: tokens.iter().map(|t| t.logprob).collect(),
        }
    }

    fn logprobs(&self, prompt: &str, action: &str) -> Result<Vec<f64>, PolicyError> {
        let plan = self.plan(prompt, action)?;
        Ok(self.score_plan(&plan).into_iter().map(|(lp, _)| lp).collect())
    }

    fn tokenize(&self, prompt: &str, action: &str) -> Result<Vec<String>, PolicyError> {
        Ok(self
            .decode(prompt, Some(action), 1.0, None)?
            .into_iter()
            .map(|t| t.text)
            .collect())
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len());
        self.params = params.to_vec();
    }
}

impl TrainablePolicy for ToySoftmaxPolicy {
    fn logprob_grads(&self, prompt: &str, action: &str) -> Result<Vec<SparseGrad>, PolicyError> {
        let plan = self.plan(prompt, action)?;
        Ok(self.score_plan(&plan).into_iter().map(|(_, g)| g).collect())
    }
}

// ---------------------------------------------------------------------------
// toy value model

const VALUE_HASH_D: usize = 16;
// [bias, position, agent one-hot x3, hashed question]
pub const TOY_VALUE_PARAMS: usize = 5 + VALUE_HASH_D;

/// Linear state-value function over the prompt's agent kind, token
/// position, and hashed question tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyValue {
    params: Vec<f64>,
}

impl Default for ToyValue {
    fn default() -> Self {
        ToyValue {
            params: vec![0.0; TOY_VALUE_PARAMS],
        }
    }
}

impl ValueModel for ToyValue {
    fn value(&self, prompt: &str, position: usize) -> f64 {
        self.features(prompt, position)
            .iter()
            .map(|&(i, v)| self.params[i] * v)
            .sum()
    }

    fn features(&self, prompt: &str, position: usize) -> SparseGrad {
        let (agent_idx, question) = match PromptView::parse(prompt) {
            Ok(PromptView::Router { question, .. }) => (0usize, question),
            Ok(PromptView::Filter { question, .. }) => (1, question),
            Ok(PromptView::Decision { question, .. }) => (2, question),
            Err(_) => (0, String::new()),
        };
        let mut out = vec![
            (0, 1.0),
            (1, (position as f64 / 8.0).min(1.0)),
            (2 + agent_idx, 1.0),
        ];
        let tokens: std::collections::BTreeSet<String> =
            tokenize(&question).into_iter().collect();
        if !tokens.is_empty() {
            let scale = 1.0 / (tokens.len() as f64).sqrt();
            let mut acc: std::collections::BTreeMap<usize, f64> =
                std::collections::BTreeMap::new();
            for t in &tokens {
                let idx = 5 + (fnv1a(t) as usize % VALUE_HASH_D);
                *acc.entry(idx).or_insert(0.0) += scale;
            }
            out.extend(acc);
        }
        out
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn set_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.params.len());
        self.params = params.to_vec();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::{render_prompt, AgentId, AgentState, Document};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gae_double_sum(deltas: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        (0..deltas.len())
            .map(|m| {
                (m..deltas.len())
                    .map(|l| (gamma * lambda).powi((l - m) as i32) * deltas[l])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn gae_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            use rand::Rng;
            let m = rng.gen_range(1..12);
            let deltas: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
            for (gamma, lambda) in [(1.0, 1.0), (0.97, 0.95), (0.5, 1.0)] {
                let fast = gae(&deltas, gamma, lambda);
                let slow = gae_double_sum(&deltas, gamma, lambda);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn telescoping_identity_at_gamma_lambda_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        use rand::Rng;
        for _ in 0..20 {
            let m = rng.gen_range(1..10);
            let rewards: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let values: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let deltas = token_deltas(&rewards, &values, 1.0);
            let adv = gae(&deltas, 1.0, 1.0);
            for i in 0..m {
                let reward_to_go: f64 = rewards[i..].iter().sum();
                assert!((adv[i] - (reward_to_go - values[i])).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn credit_lands_on_last_token_only() {
        let old = [-0.1, -0.2, -0.3];
        let reference = [-0.1, -0.25, -0.3];
        let r = token_rewards(&old, &reference, 0.005, 1.0);
        assert!((r[0] - 0.0).abs() < 1e-15);
        assert!((r[1] + 0.005 * 0.05).abs() < 1e-12);
        assert!((r[2] - 1.0).abs() < 1e-15);
    }

    fn sample_docs() -> Vec<Document> {
        vec![
            Document {
                doc_id: "d0".into(),
                title: "Signature color of Coral Vint".into(),
                body: "The signature color of Coral Vint is teal.".into(),
                origin_query: String::new(),
            },
            Document {
                doc_id: "d1".into(),
                title: "Registered partner of Auren Brell".into(),
                body: "The registered partner of Auren Brell is Coral Vint.".into(),
                origin_query: String::new(),
            },
        ]
    }

    fn router_prompt() -> String {
        let q = Question::new("q1", "What is the signature color of Auren Brell?");
        render_prompt(AgentId::Router, &AgentState::RouterState { question: q }).unwrap()
    }

    fn filter_prompt() -> String {
        let q = Question::new(
            "q2",
            "What is the signature color of the registered partner of Auren Brell?",
        );
        render_prompt(
            AgentId::Filter,
            &AgentState::FilterState {
                question: q,
                retrieved_docs: sample_docs(),
                objective: Some("registered partner of Auren Brell".into()),
            },
        )
        .unwrap()
    }

    fn decision_prompt() -> String {
        let q = Question::new(
            "q2",
            "What is the signature color of the registered partner of Auren Brell?",
        );
        render_prompt(
            AgentId::Decision,
            &AgentState::DecisionState {
                question: q,
                accumulated_docs: vec![sample_docs()[1].clone()],
                roadmap: "Step 1: registered partner of Auren Brell\nStep 2: signature color of the partner entity".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn prompt_views_round_trip() {
        match PromptView::parse(&router_prompt()).unwrap() {
            PromptView::Router {
                question,
                forced_retrieval,
            } => {
                assert_eq!(question, "What is the signature color of Auren Brell?");
                assert!(!forced_retrieval);
            }
            other => panic!("unexpected view {other:?}"),
        }
        match PromptView::parse(&filter_prompt()).unwrap() {
            PromptView::Filter {
                objective, docs, ..
            } => {
                assert_eq!(objective.as_deref(), Some("registered partner of Auren Brell"));
                assert_eq!(docs.len(), 2);
                assert_eq!(docs[0].0, "Signature color of Coral Vint");
            }
            other => panic!("unexpected view {other:?}"),
        }
        match PromptView::parse(&decision_prompt()).unwrap() {
            PromptView::Decision { roadmap, docs, .. } => {
                assert!(roadmap.starts_with("Step 1:"));
                assert_eq!(docs.len(), 1);
            }
            other => panic!("unexpected view {other:?}"),
        }
    }

    #[test]
    fn chained_query_candidates_use_document_entities() {
        let q = "What is the signature color of the registered partner of Auren Brell?";
        let docs = vec![(
            "Registered partner of Auren Brell".to_string(),
            "The registered partner of Auren Brell is Coral Vint.".to_string(),
        )];
        let cands = query_candidates(q, Some("Step 1: registered partner of Auren Brell"), &docs);
        assert!(cands
            .iter()
            .any(|c| c.is_chained && c.text == "signature color of Coral Vint"));
    }

    #[test]
    fn toy_policy_samples_parse_and_rescore() {
        let policy = ToySoftmaxPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for prompt in [router_prompt(), filter_prompt(), decision_prompt()] {
            for _ in 0..20 {
                let s = policy.sample(&prompt, 1.0, &mut rng);
                // tokenization rebuilds the text
                let toks = policy.tokenize(&prompt, &s.text).unwrap();
                assert_eq!(toks.concat(), s.text);
                // re-scoring reproduces the sampled logprobs
                let lps = policy.logprobs(&prompt, &s.text).unwrap();
                assert_eq!(lps.len(), s.logprobs.len());
                for (a, b) in lps.iter().zip(&s.logprobs) {
                    assert!((a - b).abs() <= 1e-12);
                }
                let grads = policy.logprob_grads(&prompt, &s.text).unwrap();
                assert_eq!(grads.len(), lps.len());
            }
        }
    }

    #[test]
    fn toy_policy_actions_are_always_well_formed() {
        let policy = ToySoftmaxPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let s = policy.sample(&router_prompt(), 1.0, &mut rng);
            crate::agent::parse_router_action(&s.text).unwrap();
            let s = policy.sample(&filter_prompt(), 1.0, &mut rng);
            crate::agent::parse_filter_action(&s.text, &["0".into(), "1".into()]).unwrap();
            let s = policy.sample(&decision_prompt(), 1.0, &mut rng);
            crate::agent::parse_decision_action(&s.text).unwrap();
        }
    }

    #[test]
    fn greedy_sampling_is_deterministic() {
        let mut policy = ToySoftmaxPolicy::default();
        let mut params = policy.params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        for p in params.iter_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        policy.set_params(&params);
        let mut r1 = ChaCha8Rng::seed_from_u64(0);
        let mut r2 = ChaCha8Rng::seed_from_u64(99);
        for prompt in [router_prompt(), filter_prompt(), decision_prompt()] {
            let a = policy.sample(&prompt, 0.0, &mut r1);
            let b = policy.sample(&prompt, 0.0, &mut r2);
            assert_eq!(a.text, b.text);
        }
    }

    fn synthetic_batch(policy: &ToySoftmaxPolicy) -> Vec<ReplayRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut out = Vec::new();
        for (i, prompt) in [router_prompt(), filter_prompt(), decision_prompt()]
            .into_iter()
            .cycle()
            .take(9)
            .enumerate()
        {
            let s = policy.sample(&prompt, 1.0, &mut rng);
            out.push(ReplayRecord {
                tree_id: "t".into(),
                node_id: i,
                agent: AgentId::Router,
                prompt_text: prompt,
                action_text: s.text,
                old_logprobs: s.logprobs,
                credit: (i % 3) as f64 / 2.0,
            });
        }
        out
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut behavior = ToySoftmaxPolicy::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        let mut params = behavior.params();
        for p in params.iter_mut() {
            *p = rng.gen_range(-0.3..0.3);
        }
        behavior.set_params(&params);
        let records = synthetic_batch(&behavior);
        let reference = ToySoftmaxPolicy::default();
        let mut value = ToyValue::default();
        let mut vparams = value.params();
        for p in vparams.iter_mut() {
            *p = rng.gen_range(-0.3..0.3);
        }
        value.set_params(&vparams);
        let cfg = PpoConfig::default();
        let batch = prepare_batch(&records, &reference, &value, &cfg).unwrap();

        // perturb the current policy away from the behavior policy so the
        // ratio is not identically 1
        let mut policy = behavior.clone();
        let mut params = policy.params();
        for p in params.iter_mut() {
            *p += rng.gen_range(-0.05..0.05);
        }
        policy.set_params(&params);

        let (g_p, g_v) = combined_grad(&policy, &value, &batch, &cfg).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for idx in 0..g_p.len() {
            let mut plus = policy.clone();
            let mut pp = plus.params();
            pp[idx] += h;
            plus.set_params(&pp);
            let mut minus = policy.clone();
            let mut pm = minus.params();
            pm[idx] -= h;
            minus.set_params(&pm);
            let lp = combined_loss(&plus, &value, &batch, &cfg).unwrap().total;
            let lm = combined_loss(&minus, &value, &batch, &cfg).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g_p[idx].abs()).max(1e-6);
            assert!(
                (fd - g_p[idx]).abs() / denom <= 1e-4,
                "policy param {idx}: fd={fd} analytic={}",
                g_p[idx]
            );
            checked += 1;
        }
        for idx in 0..g_v.len() {
            let mut vp = value.params();
            vp[idx] += h;
            let mut plus = value.clone();
            plus.set_params(&vp);
            vp[idx] -= 2.0 * h;
            let mut minus = value.clone();
            minus.set_params(&vp);
            let lp = combined_loss(&policy, &plus, &batch, &cfg).unwrap().total;
            let lm = combined_loss(&policy, &minus, &batch, &cfg).unwrap().total;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g_v[idx].abs()).max(1e-6);
            assert!(
                (fd - g_v[idx]).abs() / denom <= 1e-4,
                "value param {idx}: fd={fd} analytic={}",
                g_v[idx]
            );
            checked += 1;
        }
        assert!(checked > 100);
    }

    #[test]
    fn train_step_reduces_loss_on_fixed_batch() {
        let behavior = ToySoftmaxPolicy::default();
        let records = synthetic_batch(&behavior);
        let reference = ToySoftmaxPolicy::default();
        let mut value = ToyValue::default();
        let cfg = PpoConfig::default();
        let batch = prepare_batch(&records, &reference, &value, &cfg).unwrap();
        let mut policy = behavior.clone();
        let first = combined_loss(&policy, &value, &batch, &cfg).unwrap().total;
        for _ in 0..20 {
            train_step(&mut policy, &mut value, &batch, &cfg).unwrap();
        }
        let last = combined_loss(&policy, &value, &batch, &cfg).unwrap().total;
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }
}
