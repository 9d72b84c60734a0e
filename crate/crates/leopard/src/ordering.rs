//! Strict partial orderings over trajectory fragments, and encoders that turn
//! each supported feedback type into one.
//!
//! A piece of feedback becomes a [`PartialOrdering`]: a set of fragments, a
//! strict relation `lesser < greater`, and a rationality coefficient `beta`.
//! Orderings are stored transitively closed so that predecessor queries (the
//! denominator of the choice probability) are direct lookups.
//!
//! Encoders:
//! - a pairwise preference becomes its own two-element ordering;
//! - positive/negative demonstrations are preferred/dis-preferred to agent
//!   trajectories, optionally split into two orderings when agent behaviour
//!   can be as bad as the negative demonstrations;
//! - rankings, improvements, off-switch presses, proxy rewards, binary
//!   reward/punishment labels, and credit-assignment windows all map to the
//!   obvious relations over observed fragments.

use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trajectory::{
    make_fragment, CoreError, Fragment, FragmentRef, Trajectory, TrajectoryId,
    TrajectoryIdGen, TrajectoryPool, Transition,
};

#[derive(Debug, Error, PartialEq)]
pub enum OrderingError {
    #[error("relation contains a cycle involving item {0}")]
    Cycle(usize),
    #[error("relation relates an item to itself (index {0})")]
    Reflexive(usize),
    #[error("edge references unknown item index {0}")]
    EdgeOutOfRange(usize),
    #[error("rationality coefficient must be positive, got {0}")]
    NonPositiveBeta(f64),
    #[error("feedback compares a fragment with itself")]
    DegenerateFeedback,
    #[error("ranking contains duplicate fragments")]
    DuplicateInRanking,
    #[error("ranking needs at least 2 fragments, got {0}")]
    RankingTooShort(usize),
    #[error("queried item is not part of the ordering")]
    UnknownItem,
    #[error("window or stop time out of range: {0}")]
    WindowOutOfRange(String),
    #[error("no demonstration feedback: both demo pools are empty")]
    NoFeedback,
    #[error("ranking relates fragments outside the corresponding pool")]
    RankOutsidePool,
    #[error("preference fragments missing from every pool")]
    PreferenceOutsidePools,
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Smallest transitive superset of the given relation over `n` items.
///
/// Fails if the relation is reflexive or contains a cycle.
pub fn transitive_closure_pairs(
    n: usize,
    edges: &[(usize, usize)],
) -> Result<BTreeSet<(usize, usize)>, OrderingError> {
    let mut direct = vec![BTreeSet::new(); n];
    for &(lesser, greater) in edges {
        if lesser >= n {
            return Err(OrderingError::EdgeOutOfRange(lesser));
        }
        if greater >= n {
            return Err(OrderingError::EdgeOutOfRange(greater));
        }
        if lesser == greater {
            return Err(OrderingError::Reflexive(lesser));
        }
        direct[greater].insert(lesser);
    }
    // depth-first reachability from each item over its direct predecessors
    let mut closed: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for item in 0..n {
        let mut stack: Vec<usize> = direct[item].iter().copied().collect();
        let mut seen = BTreeSet::new();
        while let Some(p) = stack.pop() {
            if p == item {
                return Err(OrderingError::Cycle(item));
            }
            if seen.insert(p) {
                stack.extend(direct[p].iter().copied());
            }
        }
        closed[item] = seen;
    }
    let mut out = BTreeSet::new();
    for (greater, preds) in closed.iter().enumerate() {
        for &lesser in preds {
            out.insert((lesser, greater));
        }
    }
    Ok(out)
}

/// A strict partial order over fragments with a rationality coefficient.
///
/// The stored relation is always transitively closed; `predecessors` is a
/// plain lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialOrdering {
    items: Vec<Fragment>,
    // preds[i] = indices of every item strictly less than items[i]
    preds: Vec<Vec<usize>>,
    beta: f64,
}

impl PartialOrdering {
    /// Builds an ordering from generating edges `(lesser, greater)` given as
    /// indices into `items`, closing the relation transitively.
    pub fn from_edges(
        items: Vec<Fragment>,
        edges: &[(usize, usize)],
        beta: f64,
    ) -> Result<Self, OrderingError> {
        if !(beta > 0.0) {
            return Err(OrderingError::NonPositiveBeta(beta));
        }
        let closed = transitive_closure_pairs(items.len(), edges)?;
        let mut preds = vec![Vec::new(); items.len()];
        for (lesser, greater) in closed {
            preds[greater].push(lesser);
        }
        Ok(Self { items, preds, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn items(&self) -> &[Fragment] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// All closed `lesser < greater` pairs as index pairs.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (greater, preds) in self.preds.iter().enumerate() {
            for &lesser in preds {
                out.push((lesser, greater));
            }
        }
        out.sort_unstable();
        out
    }

    pub fn edge_count(&self) -> usize {
        self.preds.iter().map(Vec::len).sum()
    }

    pub fn index_of(&self, item: &Fragment) -> Option<usize> {
        self.items.iter().position(|f| f == item)
    }

    pub fn predecessor_indices(&self, index: usize) -> &[usize] {
        &self.preds[index]
    }

    /// Everything strictly less than `item` under the closed relation.
    pub fn predecessors(&self, item: &Fragment) -> Result<Vec<&Fragment>, OrderingError> {
        let idx = self.index_of(item).ok_or(OrderingError::UnknownItem)?;
        Ok(self.preds[idx].iter().map(|&i| &self.items[i]).collect())
    }

    /// True iff `lesser < greater` holds in the closed relation.
    pub fn relates(&self, lesser: &Fragment, greater: &Fragment) -> bool {
        match (self.index_of(lesser), self.index_of(greater)) {
            (Some(l), Some(g)) => self.preds[g].contains(&l),
            _ => false,
        }
    }

    /// Restricts the ordering to items satisfying `keep` (induced subrelation
    /// of a closed relation is closed).
    pub fn restrict(&self, keep: impl Fn(&Fragment) -> bool) -> PartialOrdering {
        let kept: Vec<usize> = (0..self.items.len())
            .filter(|&i| keep(&self.items[i]))
            .collect();
        let remap: HashMap<usize, usize> = kept.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        let items = kept.iter().map(|&i| self.items[i].clone()).collect();
        let preds = kept
            .iter()
            .map(|&i| {
                self.preds[i]
                    .iter()
                    .filter_map(|p| remap.get(p).copied())
                    .collect()
            })
            .collect();
        PartialOrdering {
            items,
            preds,
            beta: self.beta,
        }
    }

    pub fn to_doc(&self) -> OrderingDoc {
        OrderingDoc {
            beta: self.beta,
            items: self.items.iter().map(Fragment::as_ref_parts).collect(),
            edges: self.edges().iter().map(|&(l, g)| [l, g]).collect(),
        }
    }
}

/// JSON form of an ordering: fragment references plus closed index edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingDoc {
    pub beta: f64,
    pub items: Vec<FragmentRef>,
    pub edges: Vec<[usize; 2]>,
}

impl OrderingDoc {
    /// Re-binds fragment references against known trajectories.
    pub fn resolve(
        &self,
        lookup: &HashMap<TrajectoryId, Arc<Trajectory>>,
    ) -> Result<PartialOrdering, OrderingError> {
        let mut items = Vec::with_capacity(self.items.len());
        for r in &self.items {
            let traj = lookup.get(&r.traj).ok_or(OrderingError::UnknownItem)?;
            items.push(make_fragment(traj, r.start, r.len)?);
        }
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&[l, g]| (l, g)).collect();
        PartialOrdering::from_edges(items, &edges, self.beta)
    }
}

/// Encodes one pairwise preference as the singleton relation
/// `{other < preferred}`.
pub fn from_preference(
    preferred: &Fragment,
    other: &Fragment,
    beta: f64,
) -> Result<PartialOrdering, OrderingError> {
    if preferred == other {
        return Err(OrderingError::DegenerateFeedback);
    }
    PartialOrdering::from_edges(vec![preferred.clone(), other.clone()], &[(1, 0)], beta)
}

/// Encodes an explicit ranking, first element greatest, as a total order.
pub fn from_ranking(
    ordered_fragments: &[Fragment],
    beta: f64,
) -> Result<PartialOrdering, OrderingError> {
    if ordered_fragments.len() < 2 {
        return Err(OrderingError::RankingTooShort(ordered_fragments.len()));
    }
    let distinct: BTreeSet<_> = ordered_fragments.iter().collect();
    if distinct.len() != ordered_fragments.len() {
        return Err(OrderingError::DuplicateInRanking);
    }
    let mut edges = Vec::new();
    for i in 0..ordered_fragments.len() - 1 {
        edges.push((i + 1, i)); // each element is greater than the next one
    }
    PartialOrdering::from_edges(ordered_fragments.to_vec(), &edges, beta)
}

/// An improvement of agent behaviour: `{agent < improved}`.
pub fn from_improvement(
    agent: &Fragment,
    improved: &Fragment,
    beta: f64,
) -> Result<PartialOrdering, OrderingError> {
    from_preference(improved, agent, beta)
}

/// Encodes an off-switch press at time `stop_time`: the behaviour frozen at
/// the stop state is preferred to the behaviour that kept going.
///
/// The frozen trajectory repeats the state reached at `stop_time` with the
/// designated no-op action until the original horizon.
pub fn from_off(
    agent_traj: &Arc<Trajectory>,
    stop_time: usize,
    noop_action: usize,
    id_gen: &mut TrajectoryIdGen,
    beta: f64,
) -> Result<(Arc<Trajectory>, PartialOrdering), OrderingError> {
    let horizon = agent_traj.len();
    if stop_time >= horizon {
        return Err(OrderingError::WindowOutOfRange(format!(
            "stop time {stop_time} not before horizon {horizon}"
        )));
    }
    let mut transitions: Vec<Transition> = agent_traj.transitions[..stop_time].to_vec();
    let frozen_state = agent_traj.transitions[stop_time].state.clone();
    for _ in stop_time..horizon {
        transitions.push(Transition::new(
            frozen_state.clone(),
            noop_action,
            frozen_state.clone(),
        ));
    }
    let frozen = Arc::new(Trajectory::new(
        id_gen.fresh(),
        transitions,
        agent_traj.source,
    )?);
    let ordering = PartialOrdering::from_edges(
        vec![Fragment::full(&frozen), Fragment::full(agent_traj)],
        &[(1, 0)],
        beta,
    )?;
    Ok((frozen, ordering))
}

/// Proxy-reward feedback: agent fragments ordered by the stated proxy.
/// A constant proxy yields an empty relation.
pub fn from_proxy_reward(
    agent_fragments: &[Fragment],
    proxy: impl Fn(&Fragment) -> f64,
    beta: f64,
) -> Result<PartialOrdering, OrderingError> {
    let values: Vec<f64> = agent_fragments.iter().map(&proxy).collect();
    let mut edges = Vec::new();
    for i in 0..agent_fragments.len() {
        for j in 0..agent_fragments.len() {
            if values[i] < values[j] {
                edges.push((i, j));
            }
        }
    }
    PartialOrdering::from_edges(agent_fragments.to_vec(), &edges, beta)
}

/// Binary reward/punishment labels: every punished fragment is less than
/// every rewarded one.
pub fn from_reward_punishment(
    labeled: &[(Fragment, bool)],
    beta: f64,
) -> Result<PartialOrdering, OrderingError> {
    let mut edges = Vec::new();
    for (i, (_, rewarded_i)) in labeled.iter().enumerate() {
        for (j, (_, rewarded_j)) in labeled.iter().enumerate() {
            if !rewarded_i && *rewarded_j {
                edges.push((i, j));
            }
        }
    }
    let items: Vec<Fragment> = labeled.iter().map(|(f, _)| f.clone()).collect();
    PartialOrdering::from_edges(items, &edges, beta)
}

/// Credit assignment: the chosen window of length `k` is preferred to every
/// other window of the same trajectory.
pub fn from_credit_assignment(
    traj: &Arc<Trajectory>,
    k: usize,
    chosen_start: usize,
    beta: f64,
) -> Result<PartialOrdering, OrderingError> {
    if k == 0 || k > traj.len() {
        return Err(OrderingError::WindowOutOfRange(format!(
            "window size {k} for trajectory of length {}",
            traj.len()
        )));
    }
    let n_windows = traj.len() - k + 1;
    if chosen_start >= n_windows {
        return Err(OrderingError::WindowOutOfRange(format!(
            "chosen window start {chosen_start} with {n_windows} windows"
        )));
    }
    let items: Vec<Fragment> = (0..n_windows)
        .map(|s| make_fragment(traj, s, k))
        .collect::<Result<_, _>>()?;
    let edges: Vec<(usize, usize)> = (0..n_windows)
        .filter(|&s| s != chosen_start)
        .map(|s| (s, chosen_start))
        .collect();
    PartialOrdering::from_edges(items, &edges, beta)
}

/// The pools and preference set a reward model is trained from.
#[derive(Debug, Clone, Default)]
pub struct FeedbackDatasets {
    pub d_pos: TrajectoryPool,
    pub d_neg: TrajectoryPool,
    pub d_agent: TrajectoryPool,
    /// Ordered pairs (preferred, dispreferred).
    pub prefs: Vec<(Fragment, Fragment)>,
    /// Given ranking over positive demos, relating only `d_pos` members.
    pub rank_pos: Option<PartialOrdering>,
    /// Given ranking over negative demos, relating only `d_neg` members.
    pub rank_neg: Option<PartialOrdering>,
}

impl FeedbackDatasets {
    pub fn new() -> Self {
        Self::default()
    }

    /// Checks the cross-structure invariants: rankings stay inside their
    /// pool, preference fragments come from a known trajectory.
    pub fn validate(&self) -> Result<(), OrderingError> {
        if let Some(rank) = &self.rank_pos {
            for item in rank.items() {
                if self.d_pos.get(item.trajectory_id()).is_none() {
                    return Err(OrderingError::RankOutsidePool);
                }
            }
        }
        if let Some(rank) = &self.rank_neg {
            for item in rank.items() {
                if self.d_neg.get(item.trajectory_id()).is_none() {
                    return Err(OrderingError::RankOutsidePool);
                }
            }
        }
        for (a, b) in &self.prefs {
            for f in [a, b] {
                let id = f.trajectory_id();
                if self.d_agent.get(id).is_none()
                    && self.d_pos.get(id).is_none()
                    && self.d_neg.get(id).is_none()
                {
                    return Err(OrderingError::PreferenceOutsidePools);
                }
            }
        }
        Ok(())
    }

    pub fn has_feedback(&self) -> bool {
        !self.d_pos.is_empty() || !self.d_neg.is_empty() || !self.prefs.is_empty()
    }
}

/// Builds the demonstration ordering(s) over explicit fragment slices.
///
/// `split_mode = false` yields one ordering: every negative demo below every
/// agent trajectory below every positive demo, unioned with the given
/// rankings. `split_mode = true` yields two: `{agent < pos}` with the
/// positive ranking, and `{neg < pos}` with the negative ranking, with no
/// agent-vs-negative edges.
pub fn demo_orderings(
    pos: &[Fragment],
    neg: &[Fragment],
    agent: &[Fragment],
    rank_pos: Option<&PartialOrdering>,
    rank_neg: Option<&PartialOrdering>,
    split_mode: bool,
    beta: f64,
) -> Result<Vec<PartialOrdering>, OrderingError> {
    if pos.is_empty() && neg.is_empty() {
        return Err(OrderingError::NoFeedback);
    }
    let rank_edges = |rank: Option<&PartialOrdering>,
                      index_of: &dyn Fn(&Fragment) -> Option<usize>|
     -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        if let Some(rank) = rank {
            for (l, g) in rank.edges() {
                if let (Some(li), Some(gi)) = (index_of(&rank.items()[l]), index_of(&rank.items()[g]))
                {
                    out.push((li, gi));
                }
            }
        }
        out
    };

    if split_mode {
        let mut out = Vec::new();
        if !pos.is_empty() {
            // agent trajectories below positive demos
            let mut items: Vec<Fragment> = agent.to_vec();
            items.extend_from_slice(pos);
            let pos_offset = agent.len();
            let mut edges = Vec::new();
            for a in 0..agent.len() {
                for p in 0..pos.len() {
                    edges.push((a, pos_offset + p));
                }
            }
            let index_of = |f: &Fragment| items.iter().position(|x| x == f);
            edges.extend(rank_edges(rank_pos, &index_of));
            out.push(PartialOrdering::from_edges(items, &edges, beta)?);
        }
        if !neg.is_empty() {
            // negative demos below positive demos
            let mut items: Vec<Fragment> = neg.to_vec();
            items.extend_from_slice(pos);
            let pos_offset = neg.len();
            let mut edges = Vec::new();
            for n in 0..neg.len() {
                for p in 0..pos.len() {
                    edges.push((n, pos_offset + p));
                }
            }
            let index_of = |f: &Fragment| items.iter().position(|x| x == f);
            edges.extend(rank_edges(rank_neg, &index_of));
            out.push(PartialOrdering::from_edges(items, &edges, beta)?);
        }
        Ok(out)
    } else {
        let mut items: Vec<Fragment> = Vec::new();
        items.extend_from_slice(neg);
        items.extend_from_slice(agent);
        items.extend_from_slice(pos);
        let agent_offset = neg.len();
        let pos_offset = neg.len() + agent.len();
        let mut edges = Vec::new();
        for n in 0..neg.len() {
            for a in 0..agent.len() {
                edges.push((n, agent_offset + a));
            }
            for p in 0..pos.len() {
                edges.push((n, pos_offset + p));
            }
        }
        for a in 0..agent.len() {
            for p in 0..pos.len() {
                edges.push((agent_offset + a, pos_offset + p));
            }
        }
        let index_of = |f: &Fragment| items.iter().position(|x| x == f);
        edges.extend(rank_edges(rank_pos, &index_of));
        edges.extend(rank_edges(rank_neg, &index_of));
        Ok(vec![PartialOrdering::from_edges(items, &edges, beta)?])
    }
}

/// Demonstration ordering(s) over the full pools of `d`.
pub fn demos_vs_agent(
    d: &FeedbackDatasets,
    split_mode: bool,
    beta: f64,
) -> Result<Vec<PartialOrdering>, OrderingError> {
    demo_orderings(
        &d.d_pos.full_fragments(),
        &d.d_neg.full_fragments(),
        &d.d_agent.full_fragments(),
        d.rank_pos.as_ref(),
        d.rank_neg.as_ref(),
        split_mode,
        beta,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::{Source, TrajectoryId};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn traj(id: u64, len: usize) -> Arc<Trajectory> {
        let transitions = (0..len)
            .map(|k| Transition::new(vec![k as f64], 0, vec![k as f64 + 1.0]))
            .collect();
        Arc::new(Trajectory::new(TrajectoryId(id), transitions, Source::Agent).unwrap())
    }

    fn frags(n: usize) -> Vec<Fragment> {
        (0..n).map(|i| Fragment::full(&traj(i as u64, 4))).collect()
    }

    #[test]
    fn closure_of_chain_adds_skip_edge() {
        let closed = transitive_closure_pairs(3, &[(0, 1), (1, 2)]).unwrap();
        let expect: BTreeSet<_> = [(0, 1), (1, 2), (0, 2)].into_iter().collect();
        assert_eq!(closed, expect);
    }

    #[test]
    fn closure_of_closed_relation_is_identity() {
        let closed = transitive_closure_pairs(2, &[(0, 1)]).unwrap();
        let expect: BTreeSet<_> = [(0, 1)].into_iter().collect();
        assert_eq!(closed, expect);
    }

    #[test]
    fn two_cycle_is_rejected() {
        assert!(matches!(
            transitive_closure_pairs(2, &[(0, 1), (1, 0)]),
            Err(OrderingError::Cycle(_))
        ));
        assert!(matches!(
            transitive_closure_pairs(2, &[(0, 0)]),
            Err(OrderingError::Reflexive(0))
        ));
    }

    #[test]
    fn preference_orders_other_below_preferred() {
        let f = frags(2);
        let o = from_preference(&f[0], &f[1], 1.0).unwrap();
        assert_eq!(o.edges(), vec![(1, 0)]);
        assert!(o.relates(&f[1], &f[0]));
        let o = from_preference(&f[1], &f[0], 1.0).unwrap();
        assert!(o.relates(&f[0], &f[1]));
        assert_eq!(
            from_preference(&f[0], &f[0], 1.0).unwrap_err(),
            OrderingError::DegenerateFeedback
        );
    }

    #[test]
    fn preference_has_exactly_one_edge() {
        let f = frags(2);
        let o = from_preference(&f[0], &f[1], 2.0).unwrap();
        assert_eq!(o.edge_count(), 1);
        assert_eq!(o.beta(), 2.0);
    }

    #[test]
    fn ranking_closes_to_total_order() {
        let f = frags(3);
        // [c, b, a]: c greatest
        let o = from_ranking(&[f[2].clone(), f[1].clone(), f[0].clone()], 1.0).unwrap();
        assert!(o.relates(&f[0], &f[1]));
        assert!(o.relates(&f[1], &f[2]));
        assert!(o.relates(&f[0], &f[2]));
        assert_eq!(o.edge_count(), 3);

        let o = from_ranking(&[f[1].clone(), f[0].clone()], 1.0).unwrap();
        assert_eq!(o.edge_count(), 1);
        assert!(o.relates(&f[0], &f[1]));

        assert_eq!(
            from_ranking(&[f[0].clone(), f[0].clone()], 1.0).unwrap_err(),
            OrderingError::DuplicateInRanking
        );
    }

    #[test]
    fn predecessors_of_chain_and_antichain() {
        let f = frags(3);
        let chain =
            PartialOrdering::from_edges(f.clone(), &[(0, 1), (1, 2)], 1.0).unwrap();
        let preds_c: Vec<_> = chain.predecessors(&f[2]).unwrap();
        assert_eq!(preds_c.len(), 2);
        assert!(chain.predecessors(&f[0]).unwrap().is_empty());

        let antichain = PartialOrdering::from_edges(f[..2].to_vec(), &[], 1.0).unwrap();
        assert!(antichain.predecessors(&f[1]).unwrap().is_empty());

        let other = Fragment::full(&traj(99, 4));
        assert_eq!(
            chain.predecessors(&other).unwrap_err(),
            OrderingError::UnknownItem
        );
    }

    #[test]
    fn demo_ordering_chains_neg_agent_pos() {
        let p = Fragment::full(&traj(0, 4));
        let n = Fragment::full(&traj(1, 4));
        let a = Fragment::full(&traj(2, 4));
        let out = demo_orderings(
            &[p.clone()],
            &[n.clone()],
            &[a.clone()],
            None,
            None,
            false,
            1.0,
        )
        .unwrap();
        assert_eq!(out.len(), 1);
        let o = &out[0];
        assert!(o.relates(&n, &a));
        assert!(o.relates(&a, &p));
        assert!(o.relates(&n, &p));
        assert_eq!(o.edge_count(), 3);
    }

    #[test]
    fn demo_ordering_includes_rankings_without_neg() {
        let p1 = Fragment::full(&traj(0, 4));
        let p2 = Fragment::full(&traj(1, 4));
        let a = Fragment::full(&traj(2, 4));
        let rank = from_ranking(&[p1.clone(), p2.clone()], 1.0).unwrap(); // p2 < p1
        let out = demo_orderings(
            &[p1.clone(), p2.clone()],
            &[],
            &[a.clone()],
            Some(&rank),
            None,
            false,
            1.0,
        )
        .unwrap();
        let o = &out[0];
        assert!(o.relates(&a, &p1));
        assert!(o.relates(&a, &p2));
        assert!(o.relates(&p2, &p1));
        assert_eq!(o.edge_count(), 3);
    }

    #[test]
    fn split_mode_drops_agent_vs_neg_edges() {
        let p = Fragment::full(&traj(0, 4));
        let n = Fragment::full(&traj(1, 4));
        let a = Fragment::full(&traj(2, 4));
        let out = demo_orderings(
            &[p.clone()],
            &[n.clone()],
            &[a.clone()],
            None,
            None,
            true,
            1.0,
        )
        .unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].relates(&a, &p));
        assert_eq!(out[0].edge_count(), 1);
        assert!(out[1].relates(&n, &p));
        assert_eq!(out[1].edge_count(), 1);
        // no ordering anywhere relates agent and negative
        for o in &out {
            assert!(!o.relates(&n, &a));
            assert!(!o.relates(&a, &n));
        }
    }

    #[test]
    fn empty_demo_pools_are_an_error() {
        let a = Fragment::full(&traj(2, 4));
        assert_eq!(
            demo_orderings(&[], &[], &[a], None, None, false, 1.0).unwrap_err(),
            OrderingError::NoFeedback
        );
    }

    #[test]
    fn improvement_prefers_improved() {
        let f = frags(2);
        let o = from_improvement(&f[0], &f[1], 1.0).unwrap();
        assert!(o.relates(&f[0], &f[1]));
        assert_eq!(o.edge_count(), 1);
    }

    #[test]
    fn off_freezes_tail_at_stop_state() {
        let t = traj(5, 6);
        let mut ids = TrajectoryIdGen::new();
        ids.fresh(); // keep ids disjoint from existing ones in this test
        let (frozen, o) = from_off(&t, 2, 3, &mut ids, 1.0).unwrap();
        assert_eq!(frozen.len(), 6);
        // prefix copied, tail repeats state at time 2 with the no-op action
        assert_eq!(frozen.transitions[1], t.transitions[1]);
        for k in 2..6 {
            assert_eq!(frozen.transitions[k].state, t.transitions[2].state);
            assert_eq!(frozen.transitions[k].next_state, t.transitions[2].state);
            assert_eq!(frozen.transitions[k].action, 3);
        }
        assert!(o.relates(&Fragment::full(&t), &Fragment::full(&frozen)));
        assert!(matches!(
            from_off(&t, 6, 3, &mut ids, 1.0),
            Err(OrderingError::WindowOutOfRange(_))
        ));
    }

    #[test]
    fn constant_proxy_reward_orders_nothing() {
        let f = frags(3);
        let o = from_proxy_reward(&f, |_| 1.5, 1.0).unwrap();
        assert_eq!(o.edge_count(), 0);
        let o = from_proxy_reward(&f, |x| x.trajectory_id().0 as f64, 1.0).unwrap();
        assert_eq!(o.edge_count(), 3); // total order over 3 items
    }

    #[test]
    fn reward_punishment_orders_punished_below_rewarded() {
        let f = frags(3);
        let o = from_reward_punishment(
            &[(f[0].clone(), true), (f[1].clone(), false), (f[2].clone(), true)],
            1.0,
        )
        .unwrap();
        assert!(o.relates(&f[1], &f[0]));
        assert!(o.relates(&f[1], &f[2]));
        assert_eq!(o.edge_count(), 2);
    }

    #[test]
    fn credit_assignment_prefers_chosen_window() {
        let t = traj(0, 4);
        let o = from_credit_assignment(&t, 2, 1, 1.0).unwrap();
        assert_eq!(o.len(), 3); // windows starting at 0, 1, 2
        let chosen = make_fragment(&t, 1, 2).unwrap();
        // brute force over all k-windows: every other window is below chosen
        for s in [0usize, 2] {
            let w = make_fragment(&t, s, 2).unwrap();
            assert!(o.relates(&w, &chosen));
        }
        assert!(o.predecessors(&chosen).unwrap().len() == 2);
        assert!(matches!(
            from_credit_assignment(&t, 5, 0, 1.0),
            Err(OrderingError::WindowOutOfRange(_))
        ));
    }

    #[test]
    fn feedback_datasets_validation() {
        use crate::trajectory::TrajectoryPool;
        let tp = traj(0, 4);
        let tn = traj(1, 4);
        let ta = traj(2, 4);
        let mut d = FeedbackDatasets::new();
        d.d_pos = TrajectoryPool::new();
        d.d_pos.insert(Arc::clone(&tp), 0).unwrap();
        d.d_neg.insert(Arc::clone(&tn), 0).unwrap();
        d.d_agent.insert(Arc::clone(&ta), 0).unwrap();
        d.prefs.push((
            make_fragment(&ta, 0, 2).unwrap(),
            make_fragment(&tp, 1, 2).unwrap(),
        ));
        d.rank_pos = Some(
            PartialOrdering::from_edges(vec![Fragment::full(&tp)], &[], 1.0).unwrap(),
        );
        d.validate().unwrap();
        assert!(d.has_feedback());

        // ranking over a fragment outside the pool
        let stray = traj(9, 4);
        d.rank_pos = Some(
            PartialOrdering::from_edges(vec![Fragment::full(&stray)], &[], 1.0).unwrap(),
        );
        assert_eq!(d.validate().unwrap_err(), OrderingError::RankOutsidePool);
        d.rank_pos = None;

        // preference referencing an unknown trajectory
        d.prefs.push((
            make_fragment(&stray, 0, 2).unwrap(),
            make_fragment(&tp, 0, 2).unwrap(),
        ));
        assert_eq!(
            d.validate().unwrap_err(),
            OrderingError::PreferenceOutsidePools
        );
    }

    #[test]
    fn demos_vs_agent_reads_the_pools() {
        let tp = traj(0, 4);
        let tn = traj(1, 4);
        let ta = traj(2, 4);
        let mut d = FeedbackDatasets::new();
        d.d_pos.insert(Arc::clone(&tp), 0).unwrap();
        d.d_neg.insert(Arc::clone(&tn), 0).unwrap();
        d.d_agent.insert(Arc::clone(&ta), 0).unwrap();
        let out = demos_vs_agent(&d, false, 1.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].edge_count(), 3);
        assert!(out[0].relates(&Fragment::full(&tn), &Fragment::full(&tp)));
        let out = demos_vs_agent(&d, true, 1.0).unwrap();
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn ordering_doc_round_trips() {
        let t0 = traj(0, 4);
        let t1 = traj(1, 4);
        let o = from_preference(&Fragment::full(&t0), &Fragment::full(&t1), 1.5).unwrap();
        let doc = o.to_doc();
        let json = serde_json::to_string(&doc).unwrap();
        let back: OrderingDoc = serde_json::from_str(&json).unwrap();
        let lookup: HashMap<_, _> = [(t0.id, Arc::clone(&t0)), (t1.id, Arc::clone(&t1))]
            .into_iter()
            .collect();
        let resolved = back.resolve(&lookup).unwrap();
        assert_eq!(resolved, o);
    }

    proptest! {
        /// After closure, x<y and y<z imply x<z for every pair (exhaustive).
        #[test]
        fn closure_is_transitive(n in 2usize..9, edges in proptest::collection::vec((0usize..8, 0usize..8), 0..20)) {
            let edges: Vec<(usize, usize)> = edges
                .into_iter()
                .map(|(a, b)| (a % n, b % n))
                .filter(|(a, b)| a < b) // forward edges only: guaranteed acyclic
                .collect();
            let closed = transitive_closure_pairs(n, &edges).unwrap();
            for &(x, y) in &closed {
                for &(y2, z) in &closed {
                    if y == y2 {
                        prop_assert!(closed.contains(&(x, z)));
                    }
                }
            }
            // irreflexive
            for &(x, y) in &closed {
                prop_assert!(x != y);
            }
        }

        /// Non-split demo encoding equals the brute-force union of the three
        /// set-builder relations on small instances.
        #[test]
        fn demo_encoding_matches_set_builders(np in 0usize..4, nn in 0usize..4, na in 0usize..4) {
            prop_assume!(np + nn > 0);
            let pos: Vec<Fragment> = (0..np).map(|i| Fragment::full(&traj(i as u64, 3))).collect();
            let neg: Vec<Fragment> = (0..nn).map(|i| Fragment::full(&traj(100 + i as u64, 3))).collect();
            let agent: Vec<Fragment> = (0..na).map(|i| Fragment::full(&traj(200 + i as u64, 3))).collect();
            let out = demo_orderings(&pos, &neg, &agent, None, None, false, 1.0).unwrap();
            let o = &out[0];
            let mut expect: BTreeSet<(Fragment, Fragment)> = BTreeSet::new();
            for n in &neg { for a in &agent { expect.insert((n.clone(), a.clone())); } }
            for a in &agent { for p in &pos { expect.insert((a.clone(), p.clone())); } }
            for n in &neg { for p in &pos { expect.insert((n.clone(), p.clone())); } }
            let got: BTreeSet<(Fragment, Fragment)> = o
                .edges()
                .into_iter()
                .map(|(l, g)| (o.items()[l].clone(), o.items()[g].clone()))
                .collect();
            prop_assert_eq!(got, expect);
        }
    }
}
