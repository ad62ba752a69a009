//! Monte Carlo credit assignment over rollout trees, and tree disassembly
//! into flat replay records for policy optimization.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentId;
use crate::rollout::{NodeId, NodePayload, ParsedOutcome, RolloutTree};

#[derive(Debug, Error)]
pub enum CreditError {
    #[error("replay io failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("replay decode failure: {0}")]
    Decode(#[from] serde_json::Error),
}

/// Per-node credit: the mean reward over all leaves reachable from the node.
/// `reward_sum` and `leaf_count` keep the value exact; rewards are 0/1 so
/// their sums are integers represented without rounding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditAssignment {
    pub node: NodeId,
    pub reward_sum: f64,
    pub leaf_count: u64,
    pub credit: f64,
}

/// Computes credit for every node in one bottom-up pass. Children are always
/// created after their parent, so a reverse id sweep visits children first.
pub fn assign_credit(tree: &RolloutTree) -> Vec<CreditAssignment> {
    let n = tree.nodes.len();
    let mut out = vec![
        CreditAssignment {
            node: 0,
            reward_sum: 0.0,
            leaf_count: 0,
            credit: 0.0,
        };
        n
    ];
    for id in (0..n).rev() {
        let node = &tree.nodes[id];
        let (reward_sum, leaf_count) = match &node.payload {
            NodePayload::Leaf { reward, .. } => (*reward, 1u64),
            _ => {
                debug_assert!(!node.children.is_empty(), "childless non-leaf node {id}");
                node.children
                    .iter()
                    .fold((0.0, 0u64), |(s, c), &ch| {
                        (s + out[ch].reward_sum, c + out[ch].leaf_count)
                    })
            }
        };
        out[id] = CreditAssignment {
            node: id,
            reward_sum,
            leaf_count,
            credit: reward_sum / leaf_count as f64,
        };
    }
    out
}

/// One training example extracted from a rollout tree: a single sampled
/// agent decision together with its scalar credit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub tree_id: String,
    pub node_id: NodeId,
    pub agent: AgentId,
    pub prompt_text: String,
    pub action_text: String,
    /// Per-token log-probs under the behavior policy at sampling time.
    pub old_logprobs: Vec<f64>,
    pub credit: f64,
}

/// Flattens a tree into replay records. Malformed samples are unscorable
/// and skipped. Forced bracket nodes are included when the policy's own
/// log-probability was captured at rollout time: that is how the branch
/// credits reach the strategy choice. Query continuations sampled under the
/// forced `[Retrieval]` prefix carry the prefix inside their stored prompt.
pub fn disassemble(tree: &RolloutTree, credits: &[CreditAssignment]) -> Vec<ReplayRecord> {
    assert_eq!(credits.len(), tree.nodes.len());
    let mut out = Vec::new();
    for node in &tree.nodes {
        if let NodePayload::Action {
            agent,
            forced,
            prompt_text,
            action_raw,
            action_parsed: ParsedOutcome::Action(_) | ParsedOutcome::ForcedRetrievalPrefix,
            old_logprobs,
            ..
        } = &node.payload
        {
            if *forced && old_logprobs.is_empty() {
                continue;
            }
            out.push(ReplayRecord {
                tree_id: tree.tree_id.clone(),
                node_id: node.id,
                agent: *agent,
                prompt_text: prompt_text.clone(),
                action_text: action_raw.clone(),
                old_logprobs: old_logprobs.clone(),
                credit: credits[node.id].credit,
            });
        }
    }
    out
}

pub fn write_replay_jsonl<W: Write>(records: &[ReplayRecord], mut w: W) -> Result<(), CreditError> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_replay_jsonl<R: BufRead>(r: R) -> Result<Vec<ReplayRecord>, CreditError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Independent reference: enumerates every root-to-leaf path and, for each
/// node, averages the rewards of leaves whose path passes through it.
/// Exponential in path count; only for cross-checking `assign_credit`.
pub fn credit_oracle_by_paths(tree: &RolloutTree) -> Vec<CreditAssignment> {
    let n = tree.nodes.len();
    let mut sums = vec![0.0f64; n];
    let mut counts = vec![0u64; n];
    let mut stack: Vec<(NodeId, Vec<NodeId>)> = vec![(tree.root, vec![tree.root])];
    while let Some((id, path)) = stack.pop() {
        let node = &tree.nodes[id];
        if let NodePayload::Leaf { reward, .. } = node.payload {
            for &p in &path {
                sums[p] += reward;
                counts[p] += 1;
            }
        } else {
            for &ch in &node.children {
                let mut next = path.clone();
                next.push(ch);
                stack.push((ch, next));
            }
        }
    }
    (0..n)
        .map(|i| CreditAssignment {
            node: i,
            reward_sum: sums[i],
            leaf_count: counts[i],
            credit: sums[i] / counts[i] as f64,
        })
        .collect()
}
