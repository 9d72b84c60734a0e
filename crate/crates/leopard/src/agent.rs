//! Policy optimization against a reward function, plus random rollouts.
//!
//! The policy is a tabular Q-function trained by one-step Q-learning with
//! Boltzmann exploration; the temperature anneals linearly over the step
//! budget of each call. Any per-transition reward source can drive it --
//! the learned model during the main loop, the ground truth (or its
//! negation) when producing demonstrations.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;
use thiserror::Error;

use crate::env::EnvSpec;
use crate::reward::RewardError;
use crate::trajectory::{Source, Trajectory, TrajectoryIdGen, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum AgentError {
    #[error("step budget {budget} is below one horizon ({horizon})")]
    Budget { budget: usize, horizon: usize },
    #[error("non-finite reward at episode {episode}, step {step}")]
    NonFiniteReward { episode: usize, step: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("environment fault: {0}")]
    Env(String),
}

/// Q-learning hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QParams {
    pub learning_rate: f64,
    pub discount: f64,
    pub temp_start: f64,
    pub temp_end: f64,
    /// Uniform-action floor annealed alongside the temperature. Boltzmann
    /// exploration alone vanishes exponentially in Q-gaps; the floor keeps
    /// escape probability bounded whatever scale the learned reward has.
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Initial Q value. Optimistic values mark unvisited state-actions as
    /// worth reaching; replayed exact backups propagate that drive across
    /// the visited graph, so coverage is systematic.
    pub optimistic_init: f64,
    /// Reverse-order replay passes over the transition buffer after each
    /// episode. The environment is deterministic, so replayed backups use
    /// the exact one-step target; a couple of reverse sweeps propagate
    /// values across the visited graph and drain stale optimism.
    pub replay_sweeps: usize,
    /// Transition buffer size for replay.
    pub replay_capacity: usize,
}

impl Default for QParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            discount: 0.99,
            temp_start: 1.0,
            temp_end: 0.1,
            epsilon_start: 0.25,
            epsilon_end: 0.02,
            optimistic_init: 60.0,
            replay_sweeps: 2,
            replay_capacity: 4096,
        }
    }
}

/// Tabular policy: a state-action value table plus the Boltzmann temperature
/// it currently samples with.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    q: Vec<f64>,
    /// Lifetime visit counts per state-action; greedy evaluation only
    /// trusts values that have been experienced at least once.
    visits: Vec<u32>,
    n_positions: usize,
    n_actions: usize,
    pub temperature: f64,
}

impl Policy {
    pub fn new(spec: &EnvSpec) -> Self {
        Self::with_initial_value(spec, 0.0)
    }

    pub fn with_initial_value(spec: &EnvSpec, value: f64) -> Self {
        Self {
            q: vec![value; spec.n_positions() * spec.n_actions()],
            visits: vec![0; spec.n_positions() * spec.n_actions()],
            n_positions: spec.n_positions(),
            n_actions: spec.n_actions(),
            temperature: 1.0,
        }
    }

    pub fn q_value(&self, pos: usize, action: usize) -> f64 {
        self.q[pos * self.n_actions + action]
    }

    fn q_row(&self, pos: usize) -> &[f64] {
        &self.q[pos * self.n_actions..(pos + 1) * self.n_actions]
    }

    /// Best visited action; optimistic never-tried entries are not trusted.
    /// Falls back to the raw argmax at states with no experience at all.
    pub fn greedy_action(&self, pos: usize) -> usize {
        let row = self.q_row(pos);
        let visited = &self.visits[pos * self.n_actions..(pos + 1) * self.n_actions];
        let mut best: Option<usize> = None;
        for a in 0..self.n_actions {
            if visited[a] > 0 && best.is_none_or(|b| row[a] > row[b]) {
                best = Some(a);
            }
        }
        best.unwrap_or_else(|| {
            let mut b = 0;
            for a in 1..self.n_actions {
                if row[a] > row[b] {
                    b = a;
                }
            }
            b
        })
    }

    pub fn mark_visit(&mut self, pos: usize, action: usize) {
        self.visits[pos * self.n_actions + action] += 1;
    }

    /// One Q-learning backup for the transition (pos, action) -> next_pos,
    /// moving a fraction `rate` toward the one-step target.
    pub fn update(&mut self, pos: usize, action: usize, next_pos: usize, reward: f64, rate: f64, discount: f64) {
        let best_next = self
            .q_row(next_pos)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        let idx = pos * self.n_actions + action;
        let target = reward + discount * best_next;
        self.q[idx] += rate * (target - self.q[idx]);
    }

    /// Samples an action from softmax(Q(pos, .) / temperature).
    pub fn boltzmann_action(&self, pos: usize, temperature: f64, rng: &mut impl Rng) -> usize {
        softmax_sample(self.q_row(pos), temperature, rng)
    }
}

fn softmax_sample(values: &[f64], temperature: f64, rng: &mut impl Rng) -> usize {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values
        .iter()
        .map(|&v| ((v - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (a, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return a;
        }
    }
    values.len() - 1
}

/// Complete episodes with uniformly random actions; consumes
/// `floor(n_steps / horizon)` episodes worth of steps.
pub fn random_rollouts(
    spec: &EnvSpec,
    n_steps: usize,
    ids: &mut TrajectoryIdGen,
    rng: &mut impl Rng,
) -> Result<Vec<Arc<Trajectory>>, AgentError> {
    if n_steps < spec.horizon {
        return Err(AgentError::Budget {
            budget: n_steps,
            horizon: spec.horizon,
        });
    }
    let n_episodes = n_steps / spec.horizon;
    let mut out = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let mut state = spec.reset();
        let mut transitions = Vec::with_capacity(spec.horizon);
        while state.timestep < spec.horizon {
            let action = rng.gen_range(0..spec.n_actions());
            let (next, t) = spec
                .step(state, action)
                .map_err(|e| AgentError::Env(e.to_string()))?;
            transitions.push(t);
            state = next;
        }
        let traj = Trajectory::new(ids.fresh(), transitions, Source::Random)
            .map_err(|e| AgentError::Env(e.to_string()))?;
        out.push(Arc::new(traj));
    }
    Ok(out)
}

/// Runs Q-learning for `floor(n_steps / horizon)` episodes with rewards
/// supplied per transition, returning the updated policy and every
/// trajectory generated on-policy during training.
pub fn train_agent<R>(
    mut policy: Policy,
    reward: R,
    spec: &EnvSpec,
    n_steps: usize,
    params: &QParams,
    ids: &mut TrajectoryIdGen,
    rng: &mut impl Rng,
) -> Result<(Policy, Vec<Arc<Trajectory>>), AgentError>
where
    R: Fn(&Transition) -> Result<f64, RewardError>,
{
    if n_steps < spec.horizon {
        return Err(AgentError::Budget {
            budget: n_steps,
            horizon: spec.horizon,
        });
    }
    let n_episodes = n_steps / spec.horizon;
    let total_steps = (n_episodes * spec.horizon) as f64;
    let mut out = Vec::with_capacity(n_episodes);
    let mut global_step = 0usize;
    // rewards are re-queried at replay time so they always reflect the
    // current reward source
    let mut replay: VecDeque<(usize, usize, usize, Transition)> =
        VecDeque::with_capacity(params.replay_capacity);
    for episode in 0..n_episodes {
        let mut state = spec.reset();
        let mut transitions = Vec::with_capacity(spec.horizon);
        while state.timestep < spec.horizon {
            let frac = global_step as f64 / total_steps;
            let temperature =
                params.temp_start + (params.temp_end - params.temp_start) * frac;
            let epsilon =
                params.epsilon_start + (params.epsilon_end - params.epsilon_start) * frac;
            policy.temperature = temperature;
            let action = if rng.gen::<f64>() < epsilon {
                rng.gen_range(0..spec.n_actions())
            } else {
                policy.boltzmann_action(state.pos, temperature, rng)
            };
            policy.mark_visit(state.pos, action);
            let (next, transition) = spec
                .step(state, action)
                .map_err(|e| AgentError::Env(e.to_string()))?;
            let r = reward(&transition)?;
            if !r.is_finite() {
                return Err(AgentError::NonFiniteReward {
                    episode,
                    step: state.timestep,
                });
            }
            policy.update(state.pos, action, next.pos, r, params.learning_rate, params.discount);
            if replay.len() == params.replay_capacity {
                replay.pop_front();
            }
            replay.push_back((state.pos, action, next.pos, transition.clone()));
            transitions.push(transition);
            state = next;
            global_step += 1;
        }
        // deterministic environment: replayed backups are exact, and the
        // reverse order walks each trajectory end to start
        for _ in 0..params.replay_sweeps {
            for (p0, a0, p1, t0) in replay.iter().rev() {
                let r0 = reward(t0)?;
                if !r0.is_finite() {
                    return Err(AgentError::NonFiniteReward {
                        episode,
                        step: spec.horizon,
                    });
                }
                policy.update(*p0, *a0, *p1, r0, 1.0, params.discount);
            }
        }
        let traj = Trajectory::new(ids.fresh(), transitions, Source::Agent)
            .map_err(|e| AgentError::Env(e.to_string()))?;
        out.push(Arc::new(traj));
    }
    Ok((policy, out))
}

/// One greedy episode; returns its transitions.
pub fn greedy_rollout(policy: &Policy, spec: &EnvSpec) -> Vec<Transition> {
    let mut state = spec.reset();
    let mut transitions = Vec::with_capacity(spec.horizon);
    while state.timestep < spec.horizon {
        let action = policy.greedy_action(state.pos);
        let (next, t) = spec.step(state, action).expect("within horizon");
        transitions.push(t);
        state = next;
    }
    transitions
}

/// Mean ground-truth return of `n_rollouts` greedy episodes.
pub fn evaluate_greedy(policy: &Policy, spec: &EnvSpec, n_rollouts: usize) -> f64 {
    let total: f64 = (0..n_rollouts)
        .map(|_| spec.return_of(&greedy_rollout(policy, spec)))
        .sum();
    total / n_rollouts as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::dp_optimal_return;
    use crate::reward::RewardModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cliff() -> EnvSpec {
        EnvSpec::cliff_walking(48).unwrap()
    }

    #[test]
    fn rollout_count_is_floor_of_budget() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let trajs = random_rollouts(&spec, 3 * 48 + 30, &mut ids, &mut rng).unwrap();
        assert_eq!(trajs.len(), 3);
        for t in &trajs {
            assert_eq!(t.len(), 48);
        }
        assert_eq!(
            random_rollouts(&spec, 47, &mut ids, &mut rng).unwrap_err(),
            AgentError::Budget {
                budget: 47,
                horizon: 48
            }
        );
    }

    #[test]
    fn rollouts_are_seed_deterministic() {
        let spec = cliff();
        let run = |seed| {
            let mut ids = TrajectoryIdGen::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            random_rollouts(&spec, 4 * 48, &mut ids, &mut rng).unwrap()
        };
        let a = run(9);
        let b = run(9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.as_ref(), y.as_ref());
        }
    }

    #[test]
    fn random_actions_are_uniform_within_three_sigma() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_steps = 10_000;
        let trajs = random_rollouts(&spec, n_steps, &mut ids, &mut rng).unwrap();
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for t in &trajs {
            for tr in &t.transitions {
                counts[tr.action] += 1;
                total += 1;
            }
        }
        // binomial bounds: p = 1/4 per action
        let p = 0.25;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!(
                (c as f64 - total as f64 * p).abs() <= 3.0 * sigma,
                "count {c} of {total} outside 3 sigma"
            );
        }
    }

    #[test]
    fn q_learning_on_ground_truth_reaches_dp_optimum() {
        let spec = cliff();
        let optimum = dp_optimal_return(&spec);
        let mut within = 0;
        for seed in 0..16u64 {
            let mut ids = TrajectoryIdGen::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let policy = Policy::with_initial_value(&spec, QParams::default().optimistic_init);
            let (policy, _) = train_agent(
                policy,
                |t| Ok(spec.ground_truth_reward(t)),
                &spec,
                400 * 48,
                &QParams::default(),
                &mut ids,
                &mut rng,
            )
            .unwrap();
            let ret = evaluate_greedy(&policy, &spec, 1);
            if (ret - optimum).abs() <= 0.05 * optimum.abs() {
                within += 1;
            }
        }
        assert!(within >= 12, "only {within}/16 seeds reached the optimum");
    }

    #[test]
    fn zero_reward_model_behaves_like_random_policy() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let zero = RewardModel::tabular(spec.n_positions(), spec.n_actions());
        let (_, trajs) = train_agent(
            Policy::new(&spec),
            |t| zero.reward_of_transition(t),
            &spec,
            200 * 48,
            &QParams::default(),
            &mut ids,
            &mut rng,
        )
        .unwrap();
        assert_eq!(trajs.len(), 200);
        // Monte-Carlo estimate of the random-policy return
        let baseline_trajs = random_rollouts(&spec, 200 * 48, &mut ids, &mut rng).unwrap();
        let mean = |ts: &[Arc<Trajectory>]| {
            ts.iter().map(|t| spec.return_of(&t.transitions)).sum::<f64>() / ts.len() as f64
        };
        let trained = mean(&trajs);
        let baseline = mean(&baseline_trajs);
        // same distribution up to Monte-Carlo noise; random returns on the
        // cliff have std of a few hundred, so compare loosely
        let spread = baseline.abs().max(trained.abs()).max(1.0);
        assert!(
            (trained - baseline).abs() < 0.25 * spread,
            "trained {trained} vs baseline {baseline}"
        );
    }

    #[test]
    fn trained_trajectories_satisfy_chaining() {
        // Trajectory::new validates the chain; surviving construction is the check
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, trajs) = train_agent(
            Policy::new(&spec),
            |t| Ok(spec.ground_truth_reward(t)),
            &spec,
            10 * 48,
            &QParams::default(),
            &mut ids,
            &mut rng,
        )
        .unwrap();
        assert_eq!(trajs.len(), 10);
    }

    #[test]
    fn non_finite_reward_is_reported_with_location() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let err = train_agent(
            Policy::new(&spec),
            |_| Ok(f64::NAN),
            &spec,
            48,
            &QParams::default(),
            &mut ids,
            &mut rng,
        )
        .unwrap_err();
        assert_eq!(
            err,
            AgentError::NonFiniteReward {
                episode: 0,
                step: 0
            }
        );
    }
}
