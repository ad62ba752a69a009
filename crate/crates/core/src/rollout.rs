//! Tree-structured rollout: a forced deterministic stage over all three
//! strategies, then stochastic expansion under the depth-dependent branching
//! schedule, producing a reward-labeled decision tree.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{
    render_prompt, AgentAction, AgentId, AgentState, Question, RouterAction,
};
use crate::env::EnvironmentBackends;
use crate::orchestrator::{
    parse_action_for, transition_with_k, OrchestratorError, PipelineState, Transition,
};
use crate::policy::Policy;

pub const TREE_SCHEMA_VERSION: u32 = 1;

pub const RETRIEVAL_PREFIX: &str = "[Retrieval] ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutConfig {
    pub max_depth: usize,
    pub branch_threshold: usize,
    pub k_high: usize,
    pub k_low: usize,
    pub top_k_docs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub parse_retry: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            max_depth: 13,
            branch_threshold: 4,
            k_high: 2,
            k_low: 1,
            top_k_docs: 5,
            temperature: 1.0,
            seed: 0,
            parse_retry: 2,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_depth < 3 {
            return Err("max_depth must be >= 3".into());
        }
        if self.k_high < self.k_low || self.k_low < 1 {
            return Err("k_high >= k_low >= 1 required".into());
        }
        Ok(())
    }
}

/// Dynamic branching factor: wide near the root, narrow below the threshold.
pub fn branching_factor(t: usize, cfg: &RolloutConfig) -> usize {
    if t <= cfg.branch_threshold {
        cfg.k_high
    } else {
        cfg.k_low
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ParsedOutcome {
    Action(AgentAction),
    /// The forced `[Retrieval]` bracket of the deterministic stage; the query
    /// continuation lives in the child nodes.
    ForcedRetrievalPrefix,
    /// Sampled text that failed to parse; its subtree is a reward-0 leaf.
    Malformed { reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LeafTermination {
    Answered,
    DepthLimit,
    MalformedAction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodePayload {
    /// The initial Router decision point.
    Root { state: AgentState },
    /// One agent decision (forced or sampled).
    Action {
        agent: AgentId,
        forced: bool,
        state_digest: String,
        prompt_text: String,
        action_raw: String,
        action_parsed: ParsedOutcome,
        /// Token log-probs captured at sampling time; empty for forced nodes.
        old_logprobs: Vec<f64>,
    },
    /// Terminal answer produced by the environment handoff.
    Leaf {
        answer: String,
        reward: f64,
        termination: LeafTermination,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutNode {
    pub id: NodeId,
    pub depth: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub payload: NodePayload,
}

impl RolloutNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.payload, NodePayload::Leaf { .. })
    }

    pub fn reward(&self) -> Option<f64> {
        match &self.payload {
            NodePayload::Leaf { reward, .. } => Some(*reward),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTree {
    pub schema_version: u32,
    pub tree_id: String,
    pub question: Question,
    pub config: RolloutConfig,
    pub root: NodeId,
    pub nodes: Vec<RolloutNode>,
}

impl RolloutTree {
    pub fn node(&self, id: NodeId) -> &RolloutNode {
        &self.nodes[id]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &RolloutNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn max_node_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Upper bound on node count implied by the branching schedule.
    pub fn analytic_node_bound(cfg: &RolloutConfig) -> usize {
        // 3 forced branches; k_high-way branching through the threshold
        // depth, k_low-way after; times a small constant for leaf nodes.
        let widest = 3
            * cfg.k_high.pow(cfg.branch_threshold as u32 + 1)
            * cfg.k_low.pow((cfg.max_depth - cfg.branch_threshold) as u32);
        // every level can hold at most `widest` nodes
        widest * (cfg.max_depth + 2)
    }
}

struct TreeBuilder<'a> {
    nodes: Vec<RolloutNode>,
    question: Question,
    policy: &'a dyn Policy,
    env: &'a EnvironmentBackends,
    cfg: &'a RolloutConfig,
}

enum Work {
    /// Sample `branching_factor(depth)` next-agent actions under `ps`.
    Expand { node: NodeId, ps: PipelineState },
    /// Sample query continuations under the forced `[Retrieval]` prefix.
    ExpandForcedRetrieval { node: NodeId, ps: PipelineState },
}

impl<'a> TreeBuilder<'a> {
    fn add_node(&mut self, depth: usize, parent: Option<NodeId>, payload: NodePayload) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(RolloutNode {
            id,
            depth,
            parent,
            children: Vec::new(),
            payload,
        });
        if let Some(p) = parent {
            self.nodes[p].children.push(id);
        }
        id
    }

    fn node_rng(&self, node: NodeId) -> ChaCha8Rng {
        // splitmix-style mix of (seed, node_id) for a per-node stream
        let mut z = self
            .cfg
            .seed
            .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(node as u64 + 1));
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
    }

    fn score_leaf(
        &mut self,
        parent: NodeId,
        depth: usize,
        docs: &[crate::agent::Document],
        termination: LeafTermination,
    ) -> Result<NodeId, OrchestratorError> {
        let answer = self.env.llm.answer(&self.question, docs)?;
        let reward = self.env.judge.judge(&self.question, &answer)?;
        Ok(self.add_node(
            depth,
            Some(parent),
            NodePayload::Leaf {
                answer,
                reward: reward.0,
                termination,
            },
        ))
    }

    fn malformed_leaf(&mut self, parent: NodeId, depth: usize) -> NodeId {
        self.add_node(
            depth,
            Some(parent),
            NodePayload::Leaf {
                answer: String::new(),
                reward: 0.0,
                termination: LeafTermination::MalformedAction,
            },
        )
    }

    /// Applies a parsed action; creates downstream work or a scored leaf.
    fn apply_action(
        &mut self,
        node: NodeId,
        ps: &PipelineState,
        action: &AgentAction,
        queue: &mut std::collections::VecDeque<Work>,
    ) -> Result<(), OrchestratorError> {
        let depth = self.nodes[node].depth;
        let mut calls = Vec::new();
        match transition_with_k(ps, action.agent(), action, self.env, self.cfg.top_k_docs, &mut calls)? {
            Transition::Next(next) => {
                if depth + 1 >= self.cfg.max_depth {
                    // no budget for another agent decision: forced handoff
                    let docs = next.accumulated_docs;
                    self.score_leaf(node, depth + 1, &docs, LeafTermination::DepthLimit)?;
                } else {
                    queue.push_back(Work::Expand { node, ps: next });
                }
            }
            Transition::FinalHandoff { docs } => {
                self.score_leaf(node, depth + 1, &docs, LeafTermination::Answered)?;
            }
        }
        Ok(())
    }

    fn expand(
        &mut self,
        node: NodeId,
        ps: &PipelineState,
        queue: &mut std::collections::VecDeque<Work>,
    ) -> Result<(), OrchestratorError> {
        let depth = self.nodes[node].depth;
        let agent = ps.pending.agent();
        let prompt = render_prompt(agent, &ps.pending).expect("pending matches agent");
        let k = branching_factor(depth, self.cfg);
        let mut rng = self.node_rng(node);
        for _ in 0..k {
            let sampled = self.policy.sample(&prompt, self.cfg.temperature, &mut rng);
            match parse_action_for(agent, &sampled.text, ps) {
                Ok(action) => {
                    let child = self.add_node(
                        depth + 1,
                        Some(node),
                        NodePayload::Action {
                            agent,
                            forced: false,
                            state_digest: ps.pending.digest(),
                            prompt_text: prompt.clone(),
                            action_raw: sampled.text,
                            action_parsed: ParsedOutcome::Action(action.clone()),
                            old_logprobs: sampled.logprobs,
                        },
                    );
                    self.apply_action(child, ps, &action, queue)?;
                }
                Err(e) => {
                    let child = self.add_node(
                        depth + 1,
                        Some(node),
                        NodePayload::Action {
                            agent,
                            forced: false,
                            state_digest: ps.pending.digest(),
                            prompt_text: prompt.clone(),
                            action_raw: sampled.text,
                            action_parsed: ParsedOutcome::Malformed {
                                reason: e.to_string(),
                            },
                            old_logprobs: sampled.logprobs,
                        },
                    );
                    self.malformed_leaf(child, depth + 2);
                }
            }
        }
        Ok(())
    }

    fn expand_forced_retrieval(
        &mut self,
        node: NodeId,
        ps: &PipelineState,
        queue: &mut std::collections::VecDeque<Work>,
    ) -> Result<(), OrchestratorError> {
        let depth = self.nodes[node].depth;
        let base_prompt = render_prompt(AgentId::Router, &ps.pending).expect("router state");
        let prompt = format!("{base_prompt}\n{RETRIEVAL_PREFIX}");
        let k = branching_factor(depth, self.cfg);
        let mut rng = self.node_rng(node);
        for _ in 0..k {
            let sampled = self.policy.sample(&prompt, self.cfg.temperature, &mut rng);
            // reconstruct the full router action from the forced prefix plus
            // the sampled continuation
            let full = format!("{RETRIEVAL_PREFIX}{}", sampled.text);
            match crate::agent::parse_router_action(&full) {
                Ok(action @ RouterAction::Retrieval { .. }) => {
                    let action = AgentAction::Router(action);
                    let child = self.add_node(
                        depth + 1,
                        Some(node),
                        NodePayload::Action {
                            agent: AgentId::Router,
                            forced: false,
                            state_digest: ps.pending.digest(),
                            prompt_text: prompt.clone(),
                            action_raw: sampled.text,
                            action_parsed: ParsedOutcome::Action(action.clone()),
                            old_logprobs: sampled.logprobs,
                        },
                    );
                    self.apply_action(child, ps, &action, queue)?;
                }
                _ => {
                    let child = self.add_node(
                        depth + 1,
                        Some(node),
                        NodePayload::Action {
                            agent: AgentId::Router,
                            forced: false,
                            state_digest: ps.pending.digest(),
                            prompt_text: prompt.clone(),
                            action_raw: sampled.text,
                            action_parsed: ParsedOutcome::Malformed {
                                reason: "invalid query continuation".into(),
                            },
                            old_logprobs: sampled.logprobs,
                        },
                    );
                    self.malformed_leaf(child, depth + 2);
                }
            }
        }
        Ok(())
    }
}

/// The forced deterministic stage: the root spawns exactly the three strategy
/// branches. Returns the partial tree plus pending expansion work.
fn deterministic_stage(
    builder: &mut TreeBuilder,
    queue: &mut std::collections::VecDeque<Work>,
) -> Result<(), OrchestratorError> {
    let question = builder.question.clone();
    let ps0 = PipelineState::new(question.clone());
    let root_state = ps0.pending.clone();
    let root = builder.add_node(0, None, NodePayload::Root { state: root_state });
    let digest = ps0.pending.digest();
    let prompt = render_prompt(AgentId::Router, &ps0.pending).unwrap();
    // even though all three brackets are forced, the policy's own
    // log-probability is captured so the strategy choice can be trained
    // from the branch credits
    let policy = builder.policy;
    let bracket_lp = |text: &str| -> Vec<f64> {
        policy
            .logprobs(&prompt, text)
            .map(|lps| vec![lps[0]])
            .unwrap_or_default()
    };

    // [No Retrieval]: immediately terminal, answered and scored
    let nr = builder.add_node(
        1,
        Some(root),
        NodePayload::Action {
            agent: AgentId::Router,
            forced: true,
            state_digest: digest.clone(),
            prompt_text: prompt.clone(),
            action_raw: "[No Retrieval]".into(),
            action_parsed: ParsedOutcome::Action(AgentAction::Router(RouterAction::NoRetrieval)),
            old_logprobs: bracket_lp("[No Retrieval]"),
        },
    );
    builder.score_leaf(nr, 2, &[], LeafTermination::Answered)?;

    // [Retrieval]: query continuations are sampled under the forced prefix
    let retr = builder.add_node(
        1,
        Some(root),
        NodePayload::Action {
            agent: AgentId::Router,
            forced: true,
            state_digest: digest.clone(),
            prompt_text: prompt.clone(),
            action_raw: "[Retrieval]".into(),
            action_parsed: ParsedOutcome::ForcedRetrievalPrefix,
            old_logprobs: bracket_lp("[Retrieval]"),
        },
    );
    queue.push_back(Work::ExpandForcedRetrieval {
        node: retr,
        ps: ps0.clone(),
    });

    // [Planning]: the roadmap is fetched once and shared by the subtree
    let plan_action = AgentAction::Router(RouterAction::Planning);
    let plan = builder.add_node(
        1,
        Some(root),
        NodePayload::Action {
            agent: AgentId::Router,
            forced: true,
            state_digest: digest,
            prompt_text: prompt.clone(),
            action_raw: "[Planning]".into(),
            action_parsed: ParsedOutcome::Action(plan_action.clone()),
            old_logprobs: bracket_lp("[Planning]"),
        },
    );
    let mut calls = Vec::new();
    match transition_with_k(
        &ps0,
        AgentId::Router,
        &plan_action,
        builder.env,
        builder.cfg.top_k_docs,
        &mut calls,
    )? {
        Transition::Next(next) => queue.push_back(Work::Expand { node: plan, ps: next }),
        Transition::FinalHandoff { .. } => unreachable!("planning never hands off directly"),
    }
    Ok(())
}

/// Builds the full reward-labeled rollout tree for one question. With a fixed
/// seed and scripted backends the output is bit-reproducible.
pub fn build_tree(
    question: &Question,
    policy: &dyn Policy,
    env: &EnvironmentBackends,
    cfg: &RolloutConfig,
) -> Result<RolloutTree, OrchestratorError> {
    cfg.validate().expect("invalid rollout config");
    let mut builder = TreeBuilder {
        nodes: Vec::new(),
        question: question.clone(),
        policy,
        env,
        cfg,
    };
    let mut queue = std::collections::VecDeque::new();
    deterministic_stage(&mut builder, &mut queue)?;
    while let Some(work) = queue.pop_front() {
        match work {
            Work::Expand { node, ps } => builder.expand(node, &ps, &mut queue)?,
            Work::ExpandForcedRetrieval { node, ps } => {
                builder.expand_forced_retrieval(node, &ps, &mut queue)?
            }
        }
    }
    Ok(RolloutTree {
        schema_version: TREE_SCHEMA_VERSION,
        tree_id: format!("{}-{}", question.id, cfg.seed),
        question: question.clone(),
        config: cfg.clone(),
        root: 0,
        nodes: builder.nodes,
    })
}

/// Generates a random-shaped reward-labeled tree without touching any
/// backend. Fixture for credit-assignment oracles and benchmarks: shapes are
/// arbitrary (uneven arity and depth) but every childless node is a leaf.
pub fn synthetic_random_tree(seed: u64, max_children: usize, max_depth: usize) -> RolloutTree {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let question = Question::new("q-synthetic", "synthetic fixture question");
    let state = AgentState::RouterState {
        question: question.clone(),
    };
    let mut nodes = vec![RolloutNode {
        id: 0,
        depth: 0,
        parent: None,
        children: Vec::new(),
        payload: NodePayload::Root {
            state: state.clone(),
        },
    }];
    // frontier of internal nodes still owed children
    let mut frontier = vec![0usize];
    while let Some(parent) = frontier.pop() {
        let depth = nodes[parent].depth + 1;
        let n_children = rng.gen_range(1..=max_children.max(1));
        for _ in 0..n_children {
            let id = nodes.len();
            let make_leaf = depth >= max_depth || rng.gen_bool(0.35);
            let payload = if make_leaf {
                NodePayload::Leaf {
                    answer: String::new(),
                    reward: if rng.gen_bool(0.5) { 1.0 } else { 0.0 },
                    termination: LeafTermination::Answered,
                }
            } else {
                NodePayload::Action {
                    agent: AgentId::Router,
                    forced: false,
                    state_digest: state.digest(),
                    prompt_text: String::new(),
                    action_raw: "[No Retrieval]".into(),
                    action_parsed: ParsedOutcome::Action(AgentAction::Router(
                        RouterAction::NoRetrieval,
                    )),
                    old_logprobs: vec![-0.5],
                }
            };
            nodes.push(RolloutNode {
                id,
                depth,
                parent: Some(parent),
                children: Vec::new(),
                payload,
            });
            nodes[parent].children.push(id);
            if !nodes[id].is_leaf() {
                frontier.push(id);
            }
        }
    }
    RolloutTree {
        schema_version: TREE_SCHEMA_VERSION,
        tree_id: format!("synthetic-{seed}"),
        question,
        config: RolloutConfig {
            seed,
            ..RolloutConfig::default()
        },
        root: 0,
        nodes,
    }
}

/// One sampled agent decision of a single-trajectory rollout.
#[derive(Debug, Clone)]
pub struct TrajectoryStep {
    pub agent: AgentId,
    pub prompt_text: String,
    pub action_raw: String,
    pub old_logprobs: Vec<f64>,
}

/// Single-trajectory rollout used by the broadcast baseline: the Router is
/// sampled (not forced), malformed actions terminate with reward 0.
pub fn sample_trajectory(
    question: &Question,
    policy: &dyn Policy,
    env: &EnvironmentBackends,
    cfg: &RolloutConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<(Vec<TrajectoryStep>, f64), OrchestratorError> {
    let mut ps = PipelineState::new(question.clone());
    let mut steps = Vec::new();
    loop {
        let agent = ps.pending.agent();
        let prompt = render_prompt(agent, &ps.pending).expect("pending matches agent");
        let sampled = policy.sample(&prompt, cfg.temperature, rng);
        steps.push(TrajectoryStep {
            agent,
            prompt_text: prompt,
            action_raw: sampled.text.clone(),
            old_logprobs: sampled.logprobs,
        });
        let action = match parse_action_for(agent, &sampled.text, &ps) {
            Ok(a) => a,
            Err(_) => return Ok((steps, 0.0)),
        };
        let docs = if ps.step_count + 1 >= cfg.max_depth {
            // budget exhausted: forced handoff
            ps.accumulated_docs.clone()
        } else {
            match transition_with_k(&ps, agent, &action, env, cfg.top_k_docs, &mut Vec::new())? {
                Transition::Next(next) => {
                    ps = next;
                    continue;
                }
                Transition::FinalHandoff { docs } => docs,
            }
        };
        let answer = env.llm.answer(question, &docs)?;
        let reward = env.judge.judge(question, &answer)?;
        return Ok((steps, reward.0));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branching_schedule_matches_defaults() {
        let cfg = RolloutConfig::default();
        assert_eq!(branching_factor(0, &cfg), 2);
        assert_eq!(branching_factor(4, &cfg), 2);
        assert_eq!(branching_factor(5, &cfg), 1);
        assert_eq!(branching_factor(12, &cfg), 1);
    }
}
