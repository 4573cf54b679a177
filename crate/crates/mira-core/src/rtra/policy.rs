//! Score-function (REINFORCE) gradient estimation on a toy
//! evidence-selection policy: softmax logits over a small set of candidate
//! evidence subsets. Desk-scale verification of the policy-gradient math
//! without any training infrastructure.

use crate::rng::SplitMix64;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("action space must be non-empty")]
    EmptyActionSpace,
    #[error("theta has {theta} logits for {actions} actions")]
    SizeMismatch { theta: usize, actions: usize },
    #[error("logit {0} is not finite")]
    NonFiniteLogit(usize),
    #[error("num_samples must be at least 1")]
    NoSamples,
}

/// Softmax policy over a finite action set, where each action is a
/// candidate evidence subset (ids of the slices it would select).
#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    theta: Vec<f64>,
    action_space: Vec<Vec<String>>,
}

impl ToyPolicy {
    pub fn new(theta: Vec<f64>, action_space: Vec<Vec<String>>) -> Result<Self, PolicyError> {
        if action_space.is_empty() {
            return Err(PolicyError::EmptyActionSpace);
        }
        if theta.len() != action_space.len() {
            return Err(PolicyError::SizeMismatch {
                theta: theta.len(),
                actions: action_space.len(),
            });
        }
        for (i, t) in theta.iter().enumerate() {
            if !t.is_finite() {
                return Err(PolicyError::NonFiniteLogit(i));
            }
        }
        Ok(Self {
            theta,
            action_space,
        })
    }

    /// Uniform-logit policy over `n` indexed actions, for quick tests.
    pub fn uniform(n: usize) -> Self {
        Self::new(
            vec![0.0; n],
            (0..n).map(|i| vec![format!("a{i}")]).collect(),
        )
        .expect("n >= 1")
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn action_space(&self) -> &[Vec<String>] {
        &self.action_space
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Softmax action probabilities.
    pub fn probs(&self) -> Vec<f64> {
        let max = self.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.theta.iter().map(|t| (t - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    fn sample(&self, probs: &[f64], rng: &mut SplitMix64) -> usize {
        let u = rng.next_f64();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    }
}

/// Monte-Carlo policy-gradient estimate: the average over sampled actions
/// of R(a) * grad log p(a), with grad log softmax(theta)[a] = e_a - p.
/// Deterministic for a given seed.
pub fn reinforce_gradient(
    policy: &ToyPolicy,
    reward_fn: impl Fn(usize) -> f64,
    num_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, PolicyError> {
    if num_samples == 0 {
        return Err(PolicyError::NoSamples);
    }
    let probs = policy.probs();
    let n = policy.len();
    let mut rng = SplitMix64::new(seed);
    let mut grad = vec![0.0f64; n];
    for _ in 0..num_samples {
        let a = policy.sample(&probs, &mut rng);
        let r = reward_fn(a);
        for (j, g) in grad.iter_mut().enumerate() {
            let indicator = if j == a { 1.0 } else { 0.0 };
            *g += r * (indicator - probs[j]);
        }
    }
    for g in &mut grad {
        *g /= num_samples as f64;
    }
    Ok(grad)
}

/// Exact expected gradient by enumeration: sum_a p(a) R(a) (e_a - p).
/// The closed-form counterpart the Monte-Carlo estimator converges to.
pub fn exact_gradient(policy: &ToyPolicy, reward_fn: impl Fn(usize) -> f64) -> Vec<f64> {
    let probs = policy.probs();
    let n = policy.len();
    let mut grad = vec![0.0f64; n];
    for (a, pa) in probs.iter().enumerate() {
        let r = reward_fn(a);
        for (j, g) in grad.iter_mut().enumerate() {
            let indicator = if j == a { 1.0 } else { 0.0 };
            *g += pa * r * (indicator - probs[j]);
        }
    }
    grad
}

/// Exact expected reward J(theta) by enumeration.
pub fn expected_reward(policy: &ToyPolicy, reward_fn: impl Fn(usize) -> f64) -> f64 {
    policy
        .probs()
        .iter()
        .enumerate()
        .map(|(a, p)| p * reward_fn(a))
        .sum()
}
