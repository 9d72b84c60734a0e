//! Alternative likelihood models kept for comparison and verification: the
//! pairwise Bradley-Terry model, and two demonstration likelihoods --
//! Sum-of-Choices and Choose-Best-Average -- that look natural but lack the
//! loss-to-reward-gap guarantee of the partial-ordering likelihood.
//!
//! The counterexample generators construct model states that keep either
//! alternative loss at an arbitrarily small value while the reward gap
//! between a positive demonstration and an agent trajectory becomes
//! arbitrarily negative. The Sum-of-Choices gradient can be rewritten in a
//! factored form that exposes a positive feedback loop on demonstration
//! rewards; `soc_gradient_identity_discrepancy` checks that identity
//! numerically.

use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::reward::{RewardError, RewardModel, TabularReward};
use crate::trajectory::{Fragment, Source, Trajectory, TrajectoryId, Transition};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("pool {0} is empty")]
    EmptyPool(&'static str),
    #[error("epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Which alternative likelihood a report entry refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AltModelKind {
    BradleyTerry,
    SumOfChoices,
    ChooseBestAverage,
}

/// log(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log probability that `a` is preferred to `b` under the pairwise model:
/// `log[exp(R(a)) / (exp(R(a)) + exp(R(b)))]`.
pub fn bradley_terry_logprob(
    a: &Fragment,
    b: &Fragment,
    m: &RewardModel,
) -> Result<f64, BaselineError> {
    let ra = m.reward_of_fragment(a)?;
    let rb = m.reward_of_fragment(b)?;
    Ok(-softplus(rb - ra))
}

fn pool_rewards(
    pool: &[Fragment],
    m: &RewardModel,
    name: &'static str,
) -> Result<Vec<f64>, BaselineError> {
    if pool.is_empty() {
        return Err(BaselineError::EmptyPool(name));
    }
    pool.iter()
        .map(|f| m.reward_of_fragment(f).map_err(BaselineError::from))
        .collect()
}

/// Sum-of-Choices demonstration loss:
/// `-log[ sum_pos e^R / (sum_pos e^R + sum_agent e^R) ]`.
pub fn soc_loss(
    d_pos: &[Fragment],
    d_agent: &[Fragment],
    m: &RewardModel,
) -> Result<f64, BaselineError> {
    let pos = pool_rewards(d_pos, m, "d_pos")?;
    let agent = pool_rewards(d_agent, m, "d_agent")?;
    let all: Vec<f64> = pos.iter().chain(agent.iter()).copied().collect();
    Ok(log_sum_exp(&all) - log_sum_exp(&pos))
}

/// Choose-Best-Average demonstration loss:
/// `-log sigmoid(mean_pos R - mean_agent R)`.
pub fn cba_loss(
    d_pos: &[Fragment],
    d_agent: &[Fragment],
    m: &RewardModel,
) -> Result<f64, BaselineError> {
    let pos = pool_rewards(d_pos, m, "d_pos")?;
    let agent = pool_rewards(d_agent, m, "d_agent")?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(softplus(mean(&agent) - mean(&pos)))
}

/// Computes the negated Sum-of-Choices loss gradient two ways -- the direct
/// reverse-mode gradient, and the factored form
/// `sum_a P(a|T) (sum_p P(p|pos) dR(p) - dR(a))` -- and returns their
/// maximum absolute elementwise difference.
pub fn soc_gradient_identity_discrepancy(
    d_pos: &[Fragment],
    d_agent: &[Fragment],
    m: &RewardModel,
) -> Result<f64, BaselineError> {
    let pos_r = pool_rewards(d_pos, m, "d_pos")?;
    let agent_r = pool_rewards(d_agent, m, "d_agent")?;
    let all_r: Vec<f64> = pos_r.iter().chain(agent_r.iter()).copied().collect();
    let lse_all = log_sum_exp(&all_r);
    let lse_pos = log_sum_exp(&pos_r);
    let p_all = |r: f64| (r - lse_all).exp(); // choice prob out of pos + agent
    let p_pos = |r: f64| (r - lse_pos).exp(); // choice prob out of pos only

    // direct: -dL/dtheta with L = LSE(all) - LSE(pos)
    let mut direct_terms: Vec<(Fragment, f64)> = Vec::new();
    for (f, &r) in d_pos.iter().zip(&pos_r) {
        direct_terms.push((f.clone(), p_pos(r) - p_all(r)));
    }
    for (f, &r) in d_agent.iter().zip(&agent_r) {
        direct_terms.push((f.clone(), -p_all(r)));
    }
    let direct = m.gradient(&direct_terms)?.into_vec();

    // factored: the agent mass multiplies the within-pos choice distribution
    let agent_mass: f64 = agent_r.iter().map(|&r| p_all(r)).sum();
    let mut factored_terms: Vec<(Fragment, f64)> = Vec::new();
    for (f, &r) in d_pos.iter().zip(&pos_r) {
        factored_terms.push((f.clone(), agent_mass * p_pos(r)));
    }
    for (f, &r) in d_agent.iter().zip(&agent_r) {
        factored_terms.push((f.clone(), -p_all(r)));
    }
    let factored = m.gradient(&factored_terms)?.into_vec();

    Ok(direct
        .iter()
        .zip(&factored)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// A constructed model state that achieves a target loss while leaving the
/// demonstration-vs-agent reward gap unconstrained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleWitness {
    /// The constructed agent reward.
    pub r_a: f64,
    /// The loss actually achieved by the constructed state.
    pub loss: f64,
    /// `r1 - r_a`: the gap between the first positive demo and the agent.
    pub reward_gap: f64,
}

/// Three one-transition fragments hitting distinct table cells with rewards
/// `(r1, r2, r_a)`, evaluated by the real implementations.
fn witness_setup(r1: f64, r2: f64, r_a: f64) -> (Vec<Fragment>, Vec<Fragment>, RewardModel) {
    let cell = |id: u64, state: usize| {
        let feat = |s: usize| {
            let mut v = vec![0.0; 3];
            v[s] = 1.0;
            v
        };
        Arc::new(
            Trajectory::new(
                TrajectoryId(id),
                vec![Transition::new(feat(state), 0, feat(state))],
                Source::Agent,
            )
            .unwrap(),
        )
    };
    let mut table = TabularReward::zeros(3, 1);
    table.set_entry(0, 0, r1);
    table.set_entry(1, 0, r2);
    table.set_entry(2, 0, r_a);
    let pos = vec![
        Fragment::full(&cell(0, 0)),
        Fragment::full(&cell(1, 1)),
    ];
    let agent = vec![Fragment::full(&cell(2, 2))];
    (pos, agent, RewardModel::Tabular(table))
}

/// Sum-of-Choices bound failure: sets
/// `r_a = log((e^eps - 1)(e^r1 + e^r2))`, which pins the loss at exactly
/// `eps` while `r1 - r_a` grows arbitrarily negative in `r2`.
pub fn soc_bound_counterexample(
    r1: f64,
    r2: f64,
    epsilon: f64,
) -> Result<CounterexampleWitness, BaselineError> {
    if !(epsilon > 0.0) {
        return Err(BaselineError::NonPositiveEpsilon(epsilon));
    }
    let r_a = (epsilon.exp_m1()).ln() + log_sum_exp(&[r1, r2]);
    let (pos, agent, model) = witness_setup(r1, r2, r_a);
    let loss = soc_loss(&pos, &agent, &model)?;
    Ok(CounterexampleWitness {
        r_a,
        loss,
        reward_gap: r1 - r_a,
    })
}

/// Choose-Best-Average bound failure: sets
/// `r_a = log(e^eps - 1) + (r1 + r2)/2`, pinning the loss at exactly `eps`.
pub fn cba_bound_counterexample(
    r1: f64,
    r2: f64,
    epsilon: f64,
) -> Result<CounterexampleWitness, BaselineError> {
    if !(epsilon > 0.0) {
        return Err(BaselineError::NonPositiveEpsilon(epsilon));
    }
    let r_a = (epsilon.exp_m1()).ln() + 0.5 * (r1 + r2);
    let (pos, agent, model) = witness_setup(r1, r2, r_a);
    let loss = cba_loss(&pos, &agent, &model)?;
    Ok(CounterexampleWitness {
        r_a,
        loss,
        reward_gap: r1 - r_a,
    })
}
