//! Parameterized differentiable reward functions over transitions, with
//! exact reverse-mode gradients.
//!
//! Two kinds are provided: a state-action table (exact, used for the discrete
//! environments and for the analytical checks) and a small multilayer
//! perceptron over `[state features, one-hot action, next-state features]`.
//! A fragment's reward is the sum of its transition rewards.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{Fragment, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("feature vector of length {got} does not match the model's input (expected {expected})")]
    Shape { expected: usize, got: usize },
    #[error("action index {action} out of range for {actions} actions")]
    ActionOutOfRange { action: usize, actions: usize },
    #[error("non-finite value at parameter index {index}")]
    NonFinite { index: usize },
    #[error("parameter vector of length {got} does not match the architecture (expected {expected})")]
    BadParameterCount { expected: usize, got: usize },
    #[error("serialization failed: {0}")]
    Serde(String),
}

/// Gradient buffer aligned with a model's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    partials: Vec<f64>,
}

impl GradientAccumulator {
    pub fn zeros(len: usize) -> Self {
        Self {
            partials: vec![0.0; len],
        }
    }

    pub fn partials(&self) -> &[f64] {
        &self.partials
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.partials
    }

    pub fn check_finite(&self) -> Result<(), RewardError> {
        for (index, v) in self.partials.iter().enumerate() {
            if !v.is_finite() {
                return Err(RewardError::NonFinite { index });
            }
        }
        Ok(())
    }
}

/// State-action reward table. The state index is read off the one-hot block
/// at the front of the state feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularReward {
    pub n_states: usize,
    pub n_actions: usize,
    params: Vec<f64>,
}

impl TabularReward {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            params: vec![0.0; n_states * n_actions],
        }
    }

    pub fn set_entry(&mut self, state: usize, action: usize, value: f64) {
        self.params[state * self.n_actions + action] = value;
    }

    pub fn entry(&self, state: usize, action: usize) -> f64 {
        self.params[state * self.n_actions + action]
    }

    fn state_index(&self, features: &[f64]) -> Result<usize, RewardError> {
        if features.len() < self.n_states {
            return Err(RewardError::Shape {
                expected: self.n_states,
                got: features.len(),
            });
        }
        let mut best = 0;
        for i in 1..self.n_states {
            if features[i] > features[best] {
                best = i;
            }
        }
        Ok(best)
    }

    fn cell(&self, t: &Transition) -> Result<usize, RewardError> {
        if t.action >= self.n_actions {
            return Err(RewardError::ActionOutOfRange {
                action: t.action,
                actions: self.n_actions,
            });
        }
        Ok(self.state_index(&t.state)? * self.n_actions + t.action)
    }
}

/// Fully-connected network with tanh hidden layers and a scalar linear
/// output. Input is `[state, one-hot action, next_state]`.
///
/// Parameters are stored layer-major: weights row-major, then biases.
/// Initialization is uniform in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpReward {
    pub feature_dim: usize,
    pub n_actions: usize,
    pub hidden: Vec<usize>,
    params: Vec<f64>,
}

impl MlpReward {
    pub fn new(feature_dim: usize, n_actions: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        let mut fan_in = 2 * feature_dim + n_actions;
        for &width in hidden.iter().chain(std::iter::once(&1)) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..width * fan_in + width {
                params.push(rng.gen_range(-bound..bound));
            }
            fan_in = width;
        }
        Self {
            feature_dim,
            n_actions,
            hidden: hidden.to_vec(),
            params,
        }
    }

    pub fn input_dim(&self) -> usize {
        2 * self.feature_dim + self.n_actions
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut fan_in = self.input_dim();
        for &w in self.hidden.iter().chain(std::iter::once(&1)) {
            dims.push((fan_in, w));
            fan_in = w;
        }
        dims
    }

    pub fn expected_param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| i * o + o).sum()
    }

    fn input_vector(&self, t: &Transition) -> Result<Vec<f64>, RewardError> {
        if t.state.len() != self.feature_dim || t.next_state.len() != self.feature_dim {
            return Err(RewardError::Shape {
                expected: self.feature_dim,
                got: t.state.len(),
            });
        }
        if t.action >= self.n_actions {
            return Err(RewardError::ActionOutOfRange {
                action: t.action,
                actions: self.n_actions,
            });
        }
        let mut x = Vec::with_capacity(self.input_dim());
        x.extend_from_slice(&t.state);
        for a in 0..self.n_actions {
            x.push(if a == t.action { 1.0 } else { 0.0 });
        }
        x.extend_from_slice(&t.next_state);
        Ok(x)
    }

    /// Forward pass; keeps per-layer activations when `trace` is set so the
    /// backward pass can reuse them.
    fn forward(&self, t: &Transition, trace: bool) -> Result<(f64, Vec<Vec<f64>>), RewardError> {
        let mut act = self.input_vector(t)?;
        let mut activations = Vec::new();
        if trace {
            activations.push(act.clone());
        }
        let dims = self.layer_dims();
        let n_layers = dims.len();
        let mut offset = 0;
        for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let weights = &self.params[offset..offset + fan_in * fan_out];
            let biases = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let mut next = vec![0.0; fan_out];
            for (o, n) in next.iter_mut().enumerate() {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                let mut z = biases[o];
                for (w, a) in row.iter().zip(&act) {
                    z += w * a;
                }
                *n = if layer + 1 < n_layers { z.tanh() } else { z };
            }
            act = next;
            if trace {
                activations.push(act.clone());
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok((act[0], activations))
    }

    /// Accumulates `coeff * dR/dtheta` for one transition into `grad`.
    fn accumulate_grad(
        &self,
        t: &Transition,
        coeff: f64,
        grad: &mut [f64],
    ) -> Result<(), RewardError> {
        let (_, activations) = self.forward(t, true)?;
        let dims = self.layer_dims();
        // delta starts at the scalar output and walks back through tanh layers
        let mut delta = vec![coeff];
        let mut offsets = Vec::with_capacity(dims.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(offset);
            offset += fan_in * fan_out + fan_out;
        }
        for layer in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[layer];
            let offset = offsets[layer];
            let input = &activations[layer];
            let weights = &self.params[offset..offset + fan_in * fan_out];
            for o in 0..fan_out {
                let d = delta[o];
                let g_row = &mut grad[offset + o * fan_in..offset + (o + 1) * fan_in];
                for (g, a) in g_row.iter_mut().zip(input) {
                    *g += d * a;
                }
                grad[offset + fan_in * fan_out + o] += d;
            }
            if layer > 0 {
                let mut prev = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let d = delta[o];
                    let row = &weights[o * fan_in..(o + 1) * fan_in];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // input to this layer is the tanh output of the previous one
                for (p, a) in prev.iter_mut().zip(&activations[layer]) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

/// A parameterized reward function over transitions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    Tabular(TabularReward),
    Mlp(MlpReward),
}

impl RewardModel {
    pub fn tabular(n_states: usize, n_actions: usize) -> Self {
        RewardModel::Tabular(TabularReward::zeros(n_states, n_actions))
    }

    pub fn mlp(feature_dim: usize, n_actions: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        RewardModel::Mlp(MlpReward::new(feature_dim, n_actions, hidden, rng))
    }

    pub fn param_len(&self) -> usize {
        match self {
            RewardModel::Tabular(m) => m.params.len(),
            RewardModel::Mlp(m) => m.params.len(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            RewardModel::Tabular(m) => &m.params,
            RewardModel::Mlp(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            RewardModel::Tabular(m) => &mut m.params,
            RewardModel::Mlp(m) => &mut m.params,
        }
    }

    /// Validates the architecture/parameter-count invariant, e.g. after
    /// loading a checkpoint.
    pub fn validate(&self) -> Result<(), RewardError> {
        let expected = match self {
            RewardModel::Tabular(m) => m.n_states * m.n_actions,
            RewardModel::Mlp(m) => m.expected_param_count(),
        };
        if self.param_len() != expected {
            return Err(RewardError::BadParameterCount {
                expected,
                got: self.param_len(),
            });
        }
        for (index, v) in self.params().iter().enumerate() {
            if !v.is_finite() {
                return Err(RewardError::NonFinite { index });
            }
        }
        Ok(())
    }

    pub fn reward_of_transition(&self, t: &Transition) -> Result<f64, RewardError> {
        match self {
            RewardModel::Tabular(m) => Ok(m.params[m.cell(t)?]),
            RewardModel::Mlp(m) => Ok(m.forward(t, false)?.0),
        }
    }

    /// Sum of transition rewards over the fragment.
    pub fn reward_of_fragment(&self, f: &Fragment) -> Result<f64, RewardError> {
        let mut sum = 0.0;
        for t in f.transitions() {
            sum += self.reward_of_transition(t)?;
        }
        Ok(sum)
    }

    /// Adds `coeff * dR(t)/dtheta` into `grad`.
    pub fn accumulate_transition_grad(
        &self,
        t: &Transition,
        coeff: f64,
        grad: &mut [f64],
    ) -> Result<(), RewardError> {
        match self {
            RewardModel::Tabular(m) => {
                grad[m.cell(t)?] += coeff;
                Ok(())
            }
            RewardModel::Mlp(m) => m.accumulate_grad(t, coeff, grad),
        }
    }

    /// Exact reverse-mode gradient of `sum_i coeff_i * R(fragment_i)`.
    pub fn gradient(
        &self,
        weighted_terms: &[(Fragment, f64)],
    ) -> Result<GradientAccumulator, RewardError> {
        let mut acc = GradientAccumulator::zeros(self.param_len());
        for (fragment, coeff) in weighted_terms {
            for t in fragment.transitions() {
                self.accumulate_transition_grad(t, *coeff, &mut acc.partials)?;
            }
        }
        acc.check_finite()?;
        Ok(acc)
    }

    pub fn to_json(&self) -> Result<String, RewardError> {
        serde_json::to_string(self).map_err(|e| RewardError::Serde(e.to_string()))
    }

    pub fn from_json(json: &str) -> Result<Self, RewardError> {
        let model: RewardModel =
            serde_json::from_str(json).map_err(|e| RewardError::Serde(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }
}

/// Five-point central-difference gradient of `f` at `theta`; the oracle the
/// analytic gradients are checked against.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    step: f64,
) -> Vec<f64> {
    let mut work = theta.to_vec();
    let mut grad = vec![0.0; theta.len()];
    for i in 0..theta.len() {
        let orig = work[i];
        let mut eval = |x: f64| {
            work[i] = x;
            let v = f(&work);
            work[i] = orig;
            v
        };
        let f_m2 = eval(orig - 2.0 * step);
        let f_m1 = eval(orig - step);
        let f_p1 = eval(orig + step);
        let f_p2 = eval(orig + 2.0 * step);
        grad[i] = (f_m2 - 8.0 * f_m1 + 8.0 * f_p1 - f_p2) / (12.0 * step);
    }
    grad
}

/// Elementwise relative error with a small floor so near-zero coordinates
/// compare on absolute terms.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
