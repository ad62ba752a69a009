//! Orchestration engine and reinforcement-learning harness for a
//! proxy-mediated retrieval-augmented answering pipeline.
//!
//! Three lightweight agents sit between a retriever and an answering
//! language model: a router that picks a strategy, a filter that selects
//! evidence, and a decision maker that drives multi-step retrieval. The
//! crate provides the deterministic orchestrator, tree-structured rollouts,
//! Monte Carlo credit assignment, and a PPO-style multi-agent trainer,
//! together with a fully synthetic environment for closed-loop testing.

pub mod agent;
pub mod credit;
pub mod env;
pub mod orchestrator;
pub mod policy;
pub mod ppo;
pub mod rollout;
pub mod simenv;

pub use agent::{
    AgentAction, AgentError, AgentId, AgentState, DecisionAction, DecisionChoice, Document,
    FilterAction, Question, RouterAction,
};
pub use env::{EnvError, EnvironmentBackends, RewardValue};
pub use orchestrator::{InferenceTrace, PipelineState, Strategy, Transition};
pub use rollout::{RolloutConfig, RolloutTree};
