//! Group-relative clipped surrogates for tabular softmax policies.
//!
//! Both objectives average over the `G` responses of a group and, within a
//! response, over its tokens:
//!
//! ```text
//! (1/G) Σ_i (1/|o_i|) Σ_t [ min(r·A_i, clip(r, 1-ε, 1+ε)·A_i) - β·ψ(π_ref/π_θ) ]
//! ```
//!
//! with `r = π_θ/π_old`. The rewarded form uses group-normalized rewards as
//! `A_i`; the unrewarded form fixes `A ≡ 1` and never reads rewards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::k3_unchecked;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrpoError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("response {response} is empty")]
    EmptyResponse { response: usize },
    #[error("response {response} has {len} tokens, limit is {limit}")]
    ResponseTooLong { response: usize, len: usize, limit: usize },
    #[error("stored {which} probability {value} at response {response}, token {token} is outside (0, 1]")]
    StoredProbability { which: &'static str, response: usize, token: usize, value: f64 },
    #[error("action {action} is outside the alphabet of size {alphabet}")]
    ActionOutOfRange { action: usize, alphabet: usize },
    #[error("non-finite reward at response {0}")]
    Reward(usize),
    #[error("policy must have at least one action")]
    EmptyAlphabet,
    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),
    #[error("logit row for state {state} has length {got}, expected {expected}")]
    RowLength { state: StateId, got: usize, expected: usize },
    #[error("non-finite gradient entry for state {0}")]
    NonFiniteGradient(StateId),
    #[error("learning rate must be nonnegative and finite, got {0}")]
    LearningRate(f64),
}

/// Identifier of a token state (for the maze, a cell index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(pub u32);

impl std::fmt::Display for StateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-state logits; states without a row act as all-zero (uniform).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    actions: usize,
    temperature: f64,
    logits: BTreeMap<StateId, Vec<f64>>,
}

impl TabularPolicy {
    pub fn uniform(actions: usize) -> Result<Self, GrpoError> {
        Self::with_temperature(actions, 1.0)
    }

    pub fn with_temperature(actions: usize, temperature: f64) -> Result<Self, GrpoError> {
        if actions == 0 {
            return Err(GrpoError::EmptyAlphabet);
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(GrpoError::Temperature(temperature));
        }
        Ok(Self { actions, temperature, logits: BTreeMap::new() })
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_logits(&mut self, state: StateId, row: Vec<f64>) -> Result<(), GrpoError> {
        if row.len() != self.actions {
            return Err(GrpoError::RowLength { state, got: row.len(), expected: self.actions });
        }
        self.logits.insert(state, row);
        Ok(())
    }

    pub fn logits(&self, state: StateId) -> Option<&[f64]> {
        self.logits.get(&state).map(Vec::as_slice)
    }

    pub fn states(&self) -> impl Iterator<Item = StateId> + '_ {
        self.logits.keys().copied()
    }

    /// `softmax(logits[state] / temperature)`.
    pub fn action_probs(&self, state: StateId) -> Vec<f64> {
        match self.logits.get(&state) {
            None => vec![1.0 / self.actions as f64; self.actions],
            Some(row) => softmax(row, self.temperature),
        }
    }

    pub fn prob(&self, state: StateId, action: usize) -> f64 {
        self.action_probs(state)[action]
    }
}

fn softmax(row: &[f64], temperature: f64) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// One sampled token with the probabilities recorded at sampling time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenStep {
    pub state: StateId,
    pub action: usize,
    pub old_prob: f64,
    pub ref_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledResponse {
    pub steps: Vec<TokenStep>,
    pub reward: f64,
}

/// `G` responses sampled from the old policy for one prompt.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RolloutGroup {
    prompt_id: StateId,
    responses: Vec<SampledResponse>,
}

impl RolloutGroup {
    pub fn new(
        prompt_id: StateId,
        responses: Vec<SampledResponse>,
        max_response_length: usize,
    ) -> Result<Self, GrpoError> {
        if responses.len() < 2 {
            return Err(GrpoError::GroupTooSmall(responses.len()));
        }
        for (response, r) in responses.iter().enumerate() {
            if r.steps.is_empty() {
                return Err(GrpoError::EmptyResponse { response });
            }
            if r.steps.len() > max_response_length {
                return Err(GrpoError::ResponseTooLong { response, len: r.steps.len(), limit: max_response_length });
            }
            if !r.reward.is_finite() {
                return Err(GrpoError::Reward(response));
            }
            for (token, step) in r.steps.iter().enumerate() {
                for (which, value) in [("old", step.old_prob), ("reference", step.ref_prob)] {
                    if !(value > 0.0 && value <= 1.0) {
                        return Err(GrpoError::StoredProbability { which, response, token, value });
                    }
                }
            }
        }
        Ok(Self { prompt_id, responses })
    }

    pub fn prompt_id(&self) -> StateId {
        self.prompt_id
    }

    pub fn responses(&self) -> &[SampledResponse] {
        &self.responses
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }

    pub fn token_count(&self) -> usize {
        self.responses.iter().map(|r| r.steps.len()).sum()
    }

    /// Same responses with rewards replaced by `f(index, old_reward)`.
    pub fn with_rewards(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<Self, GrpoError> {
        let responses = self
            .responses
            .iter()
            .enumerate()
            .map(|(i, r)| SampledResponse { steps: r.steps.clone(), reward: f(i, r.reward) })
            .collect();
        let limit = self.responses.iter().map(|r| r.steps.len()).max().unwrap_or(0);
        Self::new(self.prompt_id, responses, limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Rewarded,
    Unrewarded,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SurrogateEval {
    pub value: f64,
    pub per_token_ratios: Vec<f64>,
    /// Length-normalized mean of `ψ(π_ref/π_θ)`, the KL estimate the penalty scales.
    pub kl_penalty: f64,
    /// Share of tokens whose ratio lies outside `[1-ε, 1+ε]`.
    pub clip_fraction: f64,
}

/// Gradient of a surrogate with respect to the logit table.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Gradient(BTreeMap<StateId, Vec<f64>>);

impl Gradient {
    pub fn get(&self, state: StateId) -> Option<&[f64]> {
        self.0.get(&state).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (StateId, &[f64])> {
        self.0.iter().map(|(s, g)| (*s, g.as_slice()))
    }

    pub fn row_mut(&mut self, state: StateId, actions: usize) -> &mut Vec<f64> {
        self.0.entry(state).or_insert_with(|| vec![0.0; actions])
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (state, row) in &other.0 {
            let target = self.0.entry(*state).or_insert_with(|| vec![0.0; row.len()]);
            for (t, g) in target.iter_mut().zip(row) {
                *t += scale * g;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.0.values().flatten().fold(0.0, |m, g| m.max(g.abs()))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `(r_i - mean) / std` with population standard deviation; all zeros when
/// every reward is equal.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std <= 1e-12 * mean.abs().max(1.0) {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn clip(ratio: f64, eps: f64) -> f64 {
    ratio.clamp(1.0 - eps, 1.0 + eps)
}

/// `min(r·A, clip(r)·A)` and its derivative in `r`. At a kink the unclipped
/// branch is taken.
fn clipped_term(ratio: f64, advantage: f64, eps: f64) -> (f64, f64) {
    let value = (ratio * advantage).min(clip(ratio, eps) * advantage);
    let slope =
        if advantage > 0.0 && ratio <= 1.0 + eps || advantage < 0.0 && ratio >= 1.0 - eps { advantage } else { 0.0 };
    (value, slope)
}

fn evaluate(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
    mode: Mode,
    gradient: Option<&mut Gradient>,
) -> Result<SurrogateEval, GrpoError> {
    let advantages = match mode {
        Mode::Rewarded => group_advantages(&group.responses.iter().map(|r| r.reward).collect::<Vec<_>>())?,
        Mode::Unrewarded => vec![1.0; group.size()],
    };
    let g = group.size() as f64;
    let temperature = policy.temperature();
    let actions = policy.actions();
    let mut gradient = gradient;

    let mut value = 0.0;
    let mut kl_penalty = 0.0;
    let mut clipped = 0usize;
    let mut ratios = Vec::with_capacity(group.token_count());
    for (response, &advantage) in group.responses.iter().zip(&advantages) {
        let weight = 1.0 / (g * response.steps.len() as f64);
        for step in &response.steps {
            if step.action >= actions {
                return Err(GrpoError::ActionOutOfRange { action: step.action, alphabet: actions });
            }
            let probs = policy.action_probs(step.state);
            let pi = probs[step.action];
            let ratio = pi / step.old_prob;
            let ref_ratio = step.ref_prob / pi;
            let (term, slope) = clipped_term(ratio, advantage, eps);
            let psi = k3_unchecked(ref_ratio);

            value += weight * (term - beta * psi);
            kl_penalty += weight * psi;
            if ratio < 1.0 - eps || ratio > 1.0 + eps {
                clipped += 1;
            }
            ratios.push(ratio);

            if let Some(grad) = gradient.as_deref_mut() {
                // d/d(log π) of the token term; d log π / d z_b = (δ_ab - π_b) / T.
                let coeff = weight * (slope * ratio - beta * (1.0 - ref_ratio)) / temperature;
                let row = grad.row_mut(step.state, actions);
                for (b, (g_b, p_b)) in row.iter_mut().zip(&probs).enumerate() {
                    let indicator = if b == step.action { 1.0 } else { 0.0 };
                    *g_b += coeff * (indicator - p_b);
                }
            }
        }
    }
    Ok(SurrogateEval {
        value,
        clip_fraction: clipped as f64 / ratios.len() as f64,
        per_token_ratios: ratios,
        kl_penalty,
    })
}

pub fn surrogate(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
    mode: Mode,
) -> Result<SurrogateEval, GrpoError> {
    evaluate(policy, group, eps, beta, mode, None)
}

/// Clipped surrogate with group-normalized reward advantages.
pub fn rewarded_surrogate(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
) -> Result<SurrogateEval, GrpoError> {
    surrogate(policy, group, eps, beta, Mode::Rewarded)
}

/// Clipped surrogate with the advantage fixed to one; rewards are ignored.
pub fn unrewarded_surrogate(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
) -> Result<SurrogateEval, GrpoError> {
    surrogate(policy, group, eps, beta, Mode::Unrewarded)
}

/// Surrogate value together with its analytic gradient over the logits.
pub fn surrogate_with_gradient(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
    mode: Mode,
) -> Result<(SurrogateEval, Gradient), GrpoError> {
    let mut gradient = Gradient::default();
    let eval = evaluate(policy, group, eps, beta, mode, Some(&mut gradient))?;
    Ok((eval, gradient))
}

pub fn surrogate_gradient(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
    mode: Mode,
) -> Result<Gradient, GrpoError> {
    surrogate_with_gradient(policy, group, eps, beta, mode).map(|(_, g)| g)
}

/// Gradient ascent: `logits + learning_rate · gradient`, as a new policy.
pub fn policy_step(
    policy: &TabularPolicy,
    gradient: &Gradient,
    learning_rate: f64,
) -> Result<TabularPolicy, GrpoError> {
    if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
        return Err(GrpoError::LearningRate(learning_rate));
    }
    let mut next = policy.clone();
    for (state, row) in gradient.iter() {
        if row.iter().any(|g| !g.is_finite()) {
            return Err(GrpoError::NonFiniteGradient(state));
        }
        if row.len() != policy.actions {
            return Err(GrpoError::RowLength { state, got: row.len(), expected: policy.actions });
        }
        if learning_rate == 0.0 || row.iter().all(|&g| g == 0.0) {
            continue;
        }
        let logits = next.logits.entry(state).or_insert_with(|| vec![0.0; row.len()]);
        for (z, g) in logits.iter_mut().zip(row) {
            *z += learning_rate * g;
        }
    }
    Ok(next)
}
