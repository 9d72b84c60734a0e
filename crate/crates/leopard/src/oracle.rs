//! Synthetic feedback generation from ground-truth reward: noisy pairwise
//! preferences, and demonstrations produced by agents trained on the true
//! objective (or its negation), ranked by their true returns.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::Arc;
use thiserror::Error;

use crate::agent::{evaluate_greedy, train_agent, AgentError, Policy, QParams};
use crate::env::EnvSpec;
use crate::ordering::{from_ranking, OrderingDoc, OrderingError, PartialOrdering};
use crate::trajectory::{
    make_fragment, CoreError, Fragment, Source, Trajectory, TrajectoryId, TrajectoryIdGen,
    Transition,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("no new trajectories to sample preferences from")]
    NoData,
    #[error("fragment length {len} exceeds the horizon {horizon}")]
    FragmentTooLong { len: usize, horizon: usize },
    #[error("could not sample two distinct fragments for a preference")]
    NoDistinctPair,
    #[error("need at least 1 demonstration, got {0}")]
    NoDemosRequested(usize),
    #[error("demonstration training produced no trajectories")]
    NoDemoTrajectories,
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Core(#[from] CoreError),
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Orders one fragment pair: `a` comes out preferred with probability
/// `sigmoid(R(a) - R(b))` under the given per-transition reward.
pub fn sample_preference(
    a: Fragment,
    b: Fragment,
    reward_fn: &dyn Fn(&Transition) -> f64,
    rng: &mut impl Rng,
) -> (Fragment, Fragment) {
    let total = |f: &Fragment| f.transitions().iter().map(reward_fn).sum::<f64>();
    let p = sigmoid(total(&a) - total(&b));
    if rng.gen::<f64>() < p {
        (a, b)
    } else {
        (b, a)
    }
}

/// Samples `n` preference pairs of fragments of length `fragment_len`.
///
/// The first fragment of each pair comes from the new trajectories, the
/// second from the combined pool (falling back to the new trajectories when
/// the pool is empty); `first_from_new = false` draws both sides from the
/// combined pool instead. Starts are uniform; sampling is with replacement.
#[allow(clippy::too_many_arguments)]
pub fn get_preferences(
    n: usize,
    new_trajs: &[Arc<Trajectory>],
    pool: &[Arc<Trajectory>],
    fragment_len: usize,
    reward_fn: &dyn Fn(&Transition) -> f64,
    first_from_new: bool,
    rng: &mut impl Rng,
) -> Result<Vec<(Fragment, Fragment)>, OracleError> {
    if new_trajs.is_empty() {
        return Err(OracleError::NoData);
    }
    let horizon = new_trajs[0].len();
    if fragment_len > horizon {
        return Err(OracleError::FragmentTooLong {
            len: fragment_len,
            horizon,
        });
    }
    let combined: Vec<&Arc<Trajectory>> = new_trajs.iter().chain(pool.iter()).collect();
    let draw = |trajs: &[&Arc<Trajectory>], rng: &mut dyn rand::RngCore| -> Fragment {
        let traj = trajs[rng.gen_range(0..trajs.len())];
        let start = rng.gen_range(0..=traj.len() - fragment_len);
        make_fragment(traj, start, fragment_len).expect("start chosen within bounds")
    };
    let new_only: Vec<&Arc<Trajectory>> = new_trajs.iter().collect();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let first = if first_from_new {
            draw(&new_only, rng)
        } else {
            draw(&combined, rng)
        };
        // redraw rather than compare a fragment with itself
        let mut second = draw(&combined, rng);
        let mut retries = 0;
        while second == first {
            if retries > 100 {
                return Err(OracleError::NoDistinctPair);
            }
            second = draw(&combined, rng);
            retries += 1;
        }
        out.push(sample_preference(first, second, reward_fn, rng));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Positive,
    Negative,
}

/// Knobs for the demonstration generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoParams {
    /// Environment steps each seed agent trains for.
    pub train_steps: usize,
    /// Seed agents trained per polarity.
    pub n_seed_agents: usize,
    /// How many of the trained agents are kept, best first.
    pub n_selected: usize,
    pub q: QParams,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            train_steps: 300 * 48,
            n_seed_agents: 4,
            n_selected: 4,
            q: QParams::default(),
        }
    }
}

/// Trains seed agents on the true reward (negated for negative polarity),
/// keeps the best few, interleaves their trajectories latest-first with the
/// best agent leading, and returns the first `n` relabelled as demos plus a
/// total-order ranking by ground-truth return.
pub fn generate_demonstrations(
    spec: &EnvSpec,
    n: usize,
    polarity: Polarity,
    params: &DemoParams,
    ids: &mut TrajectoryIdGen,
    rng: &mut impl Rng,
) -> Result<(Vec<Arc<Trajectory>>, PartialOrdering), OracleError> {
    if n == 0 {
        return Err(OracleError::NoDemosRequested(0));
    }
    let sign = match polarity {
        Polarity::Positive => 1.0,
        Polarity::Negative => -1.0,
    };
    // (objective score, trajectories latest-first) per seed agent
    let mut agents: Vec<(f64, Vec<Arc<Trajectory>>)> = Vec::new();
    for _ in 0..params.n_seed_agents {
        let mut agent_rng =
            rand_chacha::ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
        let (policy, mut trajs) = train_agent(
            Policy::with_initial_value(spec, params.q.optimistic_init),
            |t| Ok(sign * spec.ground_truth_reward(t)),
            spec,
            params.train_steps,
            &params.q,
            ids,
            &mut agent_rng,
        )?;
        if trajs.is_empty() {
            return Err(OracleError::NoDemoTrajectories);
        }
        trajs.reverse(); // latest attempts first
        let score = sign * evaluate_greedy(&policy, spec, 1);
        agents.push((score, trajs));
    }
    agents.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));
    agents.truncate(params.n_selected);

    // interleave: round r takes each agent's r-th latest trajectory
    let mut picked = Vec::with_capacity(n);
    let mut round = 0;
    while picked.len() < n {
        let mut advanced = false;
        for (_, trajs) in &agents {
            if let Some(t) = trajs.get(round) {
                picked.push(Arc::clone(t));
                advanced = true;
                if picked.len() == n {
                    break;
                }
            }
        }
        if !advanced {
            return Err(OracleError::NoDemoTrajectories);
        }
        round += 1;
    }

    let source = match polarity {
        Polarity::Positive => Source::DemoPositive,
        Polarity::Negative => Source::DemoNegative,
    };
    let demos: Vec<Arc<Trajectory>> = picked
        .iter()
        .map(|t| {
            Trajectory::new(ids.fresh(), t.transitions.clone(), source).map(Arc::new)
        })
        .collect::<Result<_, _>>()?;

    // rank by ground-truth return, best first; ties break by id for
    // determinism
    let mut scored: Vec<(f64, &Arc<Trajectory>)> = demos
        .iter()
        .map(|t| (spec.return_of(&t.transitions), t))
        .collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("finite returns")
            .then(a.1.id.cmp(&b.1.id))
    });
    let ranked: Vec<Fragment> = scored.iter().map(|(_, t)| Fragment::full(t)).collect();
    let ranking = if ranked.len() >= 2 {
        from_ranking(&ranked, 1.0)?
    } else {
        PartialOrdering::from_edges(ranked, &[], 1.0)?
    };
    Ok((demos, ranking))
}

/// Demonstrations plus their ranking, in the shared JSON formats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DemoBundle {
    pub trajectories: Vec<Trajectory>,
    pub ranking: OrderingDoc,
}

impl DemoBundle {
    pub fn new(demos: &[Arc<Trajectory>], ranking: &PartialOrdering) -> Self {
        Self {
            trajectories: demos.iter().map(|t| t.as_ref().clone()).collect(),
            ranking: ranking.to_doc(),
        }
    }

    pub fn resolve(&self) -> Result<(Vec<Arc<Trajectory>>, PartialOrdering), OracleError> {
        let demos: Vec<Arc<Trajectory>> = self
            .trajectories
            .iter()
            .map(|t| Trajectory::new(t.id, t.transitions.clone(), t.source).map(Arc::new))
            .collect::<Result<_, _>>()?;
        let lookup: HashMap<TrajectoryId, Arc<Trajectory>> =
            demos.iter().map(|t| (t.id, Arc::clone(t))).collect();
        let ranking = self.ranking.resolve(&lookup)?;
        Ok((demos, ranking))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::random_rollouts;
    use rand_chacha::ChaCha8Rng;

    fn cliff() -> EnvSpec {
        EnvSpec::cliff_walking(48).unwrap()
    }

    /// Fragments with exact reward difference `delta` under a reward that
    /// reads the first feature entry.
    fn fragment_pair(delta: f64) -> (Fragment, Fragment, impl Fn(&Transition) -> f64) {
        let traj = |id: u64, value: f64| {
            Arc::new(
                Trajectory::new(
                    TrajectoryId(id),
                    vec![Transition::new(vec![value], 0, vec![value])],
                    Source::Agent,
                )
                .unwrap(),
            )
        };
        let a = Fragment::full(&traj(0, delta));
        let b = Fragment::full(&traj(1, 0.0));
        (a, b, |t: &Transition| t.state[0])
    }

    #[test]
    fn preference_rate_matches_sigmoid_within_99_percent_bounds() {
        let n = 10_000;
        for (i, delta) in [0.0, 1.0, -1.0, 2.0, -2.0].into_iter().enumerate() {
            let (a, b, reward) = fragment_pair(delta);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
            let mut wins = 0;
            for _ in 0..n {
                let (first, _) =
                    sample_preference(a.clone(), b.clone(), &reward, &mut rng);
                if first == a {
                    wins += 1;
                }
            }
            let p = sigmoid(delta);
            let margin = 2.5758 * (p * (1.0 - p) / n as f64).sqrt();
            let observed = wins as f64 / n as f64;
            assert!(
                (observed - p).abs() <= margin,
                "delta {delta}: observed {observed}, expected {p} +- {margin}"
            );
        }
    }

    #[test]
    fn extreme_gap_is_deterministic() {
        let (a, b, reward) = fragment_pair(1e6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let (first, _) = sample_preference(a.clone(), b.clone(), &reward, &mut rng);
            assert_eq!(first, a);
        }
    }

    #[test]
    fn preference_batch_has_requested_shape() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let new = random_rollouts(&spec, 3 * 48, &mut ids, &mut rng).unwrap();
        let reward = |t: &Transition| spec.shaped_reward(t).unwrap();

        let empty = get_preferences(0, &new, &[], 16, &reward, true, &mut rng).unwrap();
        assert!(empty.is_empty());

        let prefs = get_preferences(12, &new, &[], 16, &reward, true, &mut rng).unwrap();
        assert_eq!(prefs.len(), 12);
        for (a, b) in &prefs {
            assert_eq!(a.len(), 16);
            assert_eq!(b.len(), 16);
            // pool empty: both sides fall back to the new trajectories
            assert!(new.iter().any(|t| t.id == a.trajectory_id()));
            assert!(new.iter().any(|t| t.id == b.trajectory_id()));
        }

        assert!(matches!(
            get_preferences(1, &[], &new, 16, &reward, true, &mut rng),
            Err(OracleError::NoData)
        ));
        assert!(matches!(
            get_preferences(1, &new, &[], 49, &reward, true, &mut rng),
            Err(OracleError::FragmentTooLong { .. })
        ));
    }

    #[test]
    fn positive_demos_reach_the_goal_and_rank_by_return() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = DemoParams::default();
        let (demos, ranking) =
            generate_demonstrations(&spec, 2, Polarity::Positive, &params, &mut ids, &mut rng)
                .unwrap();
        assert_eq!(demos.len(), 2);
        let goal = spec.goal_pos();
        for d in &demos {
            assert_eq!(d.source, Source::DemoPositive);
            let visited_goal = d
                .transitions
                .iter()
                .any(|t| spec.decode_pos(&t.next_state) == goal);
            assert!(visited_goal, "demo never reached the goal region");
        }
        // ranking is a total order over exactly the returned demos with the
        // higher-return demo on top
        assert_eq!(ranking.len(), 2);
        assert_eq!(ranking.edge_count(), 1);
        let returns: HashMap<TrajectoryId, f64> = demos
            .iter()
            .map(|d| (d.id, spec.return_of(&d.transitions)))
            .collect();
        for (l, g) in ranking.edges() {
            let lesser = &ranking.items()[l];
            let greater = &ranking.items()[g];
            assert!(returns[&greater.trajectory_id()] >= returns[&lesser.trajectory_id()]);
        }
    }

    #[test]
    fn negative_demos_are_worse_than_random() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = DemoParams {
            train_steps: 200 * 48,
            ..DemoParams::default()
        };
        let (demos, _) =
            generate_demonstrations(&spec, 2, Polarity::Negative, &params, &mut ids, &mut rng)
                .unwrap();
        // Monte-Carlo random-policy baseline
        let baseline_trajs = random_rollouts(&spec, 200 * 48, &mut ids, &mut rng).unwrap();
        let baseline = baseline_trajs
            .iter()
            .map(|t| spec.return_of(&t.transitions))
            .sum::<f64>()
            / baseline_trajs.len() as f64;
        for d in &demos {
            let r = spec.return_of(&d.transitions);
            assert!(
                r < baseline,
                "negative demo return {r} not below the random baseline {baseline}"
            );
        }
    }

    #[test]
    fn demo_generation_is_seed_deterministic() {
        let spec = cliff();
        let run = || {
            let mut ids = TrajectoryIdGen::new();
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let params = DemoParams {
                train_steps: 100 * 48,
                ..DemoParams::default()
            };
            generate_demonstrations(&spec, 3, Polarity::Positive, &params, &mut ids, &mut rng)
                .unwrap()
        };
        let (d1, r1) = run();
        let (d2, r2) = run();
        for (a, b) in d1.iter().zip(&d2) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
        assert_eq!(r1, r2);
    }

    #[test]
    fn demo_bundle_round_trips() {
        let spec = cliff();
        let mut ids = TrajectoryIdGen::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = DemoParams {
            train_steps: 100 * 48,
            ..DemoParams::default()
        };
        let (demos, ranking) =
            generate_demonstrations(&spec, 2, Polarity::Positive, &params, &mut ids, &mut rng)
                .unwrap();
        let bundle = DemoBundle::new(&demos, &ranking);
        let json = serde_json::to_string(&bundle).unwrap();
        let back: DemoBundle = serde_json::from_str(&json).unwrap();
        let (demos2, ranking2) = back.resolve().unwrap();
        assert_eq!(demos.len(), demos2.len());
        assert_eq!(ranking, ranking2);
    }
}
