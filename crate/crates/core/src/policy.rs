//! The pluggable stochastic policy contract: text prompt in, action text and
//! token-level log-probabilities out.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::RngCore;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("policy cannot score action {action:?} for this prompt: {reason}")]
    UnscorableAction { action: String, reason: String },
    #[error("unrecognized prompt shape: {0}")]
    UnknownPrompt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub text: String,
    /// One log-probability per action token, each <= 0.
    pub logprobs: Vec<f64>,
}

pub trait Policy: Send + Sync {
    /// Samples an action for the rendered prompt. Temperature 0 means greedy.
    fn sample(&self, prompt: &str, temperature: f64, rng: &mut dyn RngCore) -> Sampled;

    /// Per-token log-probabilities of `action` under current parameters.
    fn logprobs(&self, prompt: &str, action: &str) -> Result<Vec<f64>, PolicyError>;

    /// Splits `action` into the policy's token texts; concatenating them
    /// reproduces `action`. Length matches `logprobs`.
    fn tokenize(&self, prompt: &str, action: &str) -> Result<Vec<String>, PolicyError>;

    /// Flat parameter vector, for optimization and finite-difference checks.
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]);
}

/// Fixture policy for tests and golden traces: replays canned outputs per
/// prompt, in order, repeating the last one.
pub struct ScriptedPolicy {
    outputs: Vec<(String, Vec<String>)>,
    cursors: Mutex<HashMap<String, usize>>,
    /// Fallback output when a prompt has no script.
    pub default_output: String,
}

impl ScriptedPolicy {
    pub fn new() -> Self {
        ScriptedPolicy {
            outputs: Vec::new(),
            cursors: Mutex::new(HashMap::new()),
            default_output: String::new(),
        }
    }

    /// Registers outputs keyed by a substring of the prompt (prompts are long;
    /// matching on the full text is brittle in fixtures). The first registered
    /// key that is contained in the prompt wins.
    pub fn script(mut self, prompt_marker: impl Into<String>, outputs: &[&str]) -> Self {
        self.outputs.push((
            prompt_marker.into(),
            outputs.iter().map(|s| s.to_string()).collect(),
        ));
        self
    }

    fn lookup(&self, prompt: &str) -> String {
        for (marker, outs) in &self.outputs {
            if prompt.contains(marker.as_str()) {
                let mut cursors = self.cursors.lock().unwrap();
                let cursor = cursors.entry(marker.clone()).or_insert(0);
                let out = outs[(*cursor).min(outs.len() - 1)].clone();
                *cursor += 1;
                return out;
            }
        }
        self.default_output.clone()
    }
}

impl Default for ScriptedPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for ScriptedPolicy {
    fn sample(&self, prompt: &str, _temperature: f64, _rng: &mut dyn RngCore) -> Sampled {
        Sampled {
            text: self.lookup(prompt),
            logprobs: vec![0.0],
        }
    }

    fn logprobs(&self, _prompt: &str, _action: &str) -> Result<Vec<f64>, PolicyError> {
        Ok(vec![0.0])
    }

    fn tokenize(&self, _prompt: &str, action: &str) -> Result<Vec<String>, PolicyError> {
        Ok(vec![action.to_string()])
    }

    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn set_params(&mut self, _params: &[f64]) {}
}
