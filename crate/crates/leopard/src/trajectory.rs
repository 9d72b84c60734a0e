//! Trajectory, fragment, and pool primitives shared by every other module.
//!
//! A [`Trajectory`] is a fixed-horizon sequence of environment transitions.
//! A [`Fragment`] is a view into a contiguous range of one trajectory; it is
//! the unit that partial orderings relate and that the reward model scores.
//! Fragments compare by identity `(trajectory id, start, length)`, never by
//! content, so two fragments of the same trajectory stay distinguishable
//! inside an ordering.

use std::cmp::Ordering as CmpOrdering;
use std::collections::HashSet;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("fragment range [{start}, {start}+{len}) out of bounds for trajectory of length {traj_len}")]
    OutOfRange {
        start: usize,
        len: usize,
        traj_len: usize,
    },
    #[error("fragment length must be at least 1")]
    EmptyFragment,
    #[error("trajectory must contain at least one transition")]
    EmptyTrajectory,
    #[error("transition {index} does not chain: next_state differs from the following state")]
    BrokenChain { index: usize },
    #[error("state vectors have inconsistent dimensions at transition {index}")]
    DimensionMismatch { index: usize },
    #[error("duplicate trajectory id {0} in pool")]
    DuplicateId(u64),
    #[error("generation {got} is lower than the pool's latest generation {latest}")]
    NonMonotoneGeneration { got: u32, latest: u32 },
    #[error("serialization failed: {0}")]
    Serde(String),
    #[error("io error: {0}")]
    Io(String),
}

/// Stable identifier for a trajectory, unique within a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct TrajectoryId(pub u64);

impl fmt::Display for TrajectoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Issues fresh trajectory ids in insertion order. One generator per run keeps
/// ids deterministic regardless of how runs are scheduled.
#[derive(Debug, Default)]
pub struct TrajectoryIdGen {
    next: u64,
}

impl TrajectoryIdGen {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fresh(&mut self) -> TrajectoryId {
        let id = TrajectoryId(self.next);
        self.next += 1;
        id
    }
}

/// Where a trajectory came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Agent,
    DemoPositive,
    DemoNegative,
    Random,
}

/// One environment step: state features, discrete action, next-state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn new(state: Vec<f64>, action: usize, next_state: Vec<f64>) -> Self {
        Self {
            state,
            action,
            next_state,
        }
    }
}

/// An ordered sequence of transitions with a fixed length.
///
/// Consecutive transitions must chain: `transitions[k].next_state` equals
/// `transitions[k+1].state` exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: TrajectoryId,
    pub source: Source,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn new(
        id: TrajectoryId,
        transitions: Vec<Transition>,
        source: Source,
    ) -> Result<Self, CoreError> {
        if transitions.is_empty() {
            return Err(CoreError::EmptyTrajectory);
        }
        let dim = transitions[0].state.len();
        for (k, t) in transitions.iter().enumerate() {
            if t.state.len() != dim || t.next_state.len() != dim {
                return Err(CoreError::DimensionMismatch { index: k });
            }
        }
        for k in 0..transitions.len() - 1 {
            if transitions[k].next_state != transitions[k + 1].state {
                return Err(CoreError::BrokenChain { index: k });
            }
        }
        Ok(Self {
            id,
            source,
            transitions,
        })
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }
}

/// A view into a contiguous transition range `[start, start+len)` of one
/// trajectory.
///
/// Equality, ordering, and hashing use only `(trajectory id, start, len)`.
#[derive(Clone)]
pub struct Fragment {
    traj: Arc<Trajectory>,
    start: usize,
    len: usize,
}

impl Fragment {
    /// Covers the whole trajectory.
    pub fn full(traj: &Arc<Trajectory>) -> Self {
        Self {
            traj: Arc::clone(traj),
            start: 0,
            len: traj.len(),
        }
    }

    pub fn trajectory(&self) -> &Arc<Trajectory> {
        &self.traj
    }

    pub fn trajectory_id(&self) -> TrajectoryId {
        self.traj.id
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false // length >= 1 by construction
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.traj.transitions[self.start..self.start + self.len]
    }

    fn key(&self) -> (TrajectoryId, usize, usize) {
        (self.traj.id, self.start, self.len)
    }

    pub fn as_ref_parts(&self) -> FragmentRef {
        FragmentRef {
            traj: self.traj.id,
            start: self.start,
            len: self.len,
        }
    }
}

impl fmt::Debug for Fragment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Fragment(traj={}, [{}, {}))",
            self.traj.id,
            self.start,
            self.start + self.len
        )
    }
}

impl PartialEq for Fragment {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for Fragment {}

impl PartialOrd for Fragment {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl Ord for Fragment {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        self.key().cmp(&other.key())
    }
}

impl Hash for Fragment {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state);
    }
}

/// Serializable fragment identity, used by the ordering JSON format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FragmentRef {
    pub traj: TrajectoryId,
    pub start: usize,
    pub len: usize,
}

/// Builds a fragment view over `[start, start+len)` of `traj`.
pub fn make_fragment(
    traj: &Arc<Trajectory>,
    start: usize,
    len: usize,
) -> Result<Fragment, CoreError> {
    if len == 0 {
        return Err(CoreError::EmptyFragment);
    }
    if start + len > traj.len() {
        return Err(CoreError::OutOfRange {
            start,
            len,
            traj_len: traj.len(),
        });
    }
    Ok(Fragment {
        traj: Arc::clone(traj),
        start,
        len,
    })
}

/// True iff `a`'s range is strictly contained in `b`'s range of the same
/// trajectory (equal fragments are not strict subfragments).
pub fn is_strict_subfragment(a: &Fragment, b: &Fragment) -> bool {
    a.trajectory_id() == b.trajectory_id()
        && a.start >= b.start
        && a.start + a.len <= b.start + b.len
        && a != b
}

/// Filters `fragments` down to the maximal ones: those not strictly contained
/// in any other fragment of the input.
pub fn full_fragments(fragments: &[Fragment]) -> Vec<Fragment> {
    fragments
        .iter()
        .filter(|a| !fragments.iter().any(|b| is_strict_subfragment(a, b)))
        .cloned()
        .collect()
}

/// An indexed collection of trajectories with a per-trajectory generation
/// counter recording the iteration that produced it.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryPool {
    entries: Vec<(Arc<Trajectory>, u32)>,
    ids: HashSet<TrajectoryId>,
}

impl TrajectoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, traj: Arc<Trajectory>, generation: u32) -> Result<(), CoreError> {
        if !self.ids.insert(traj.id) {
            return Err(CoreError::DuplicateId(traj.id.0));
        }
        if let Some(&(_, latest)) = self.entries.last() {
            if generation < latest {
                return Err(CoreError::NonMonotoneGeneration {
                    got: generation,
                    latest,
                });
            }
        }
        self.entries.push((traj, generation));
        Ok(())
    }

    pub fn extend(
        &mut self,
        trajs: impl IntoIterator<Item = Arc<Trajectory>>,
        generation: u32,
    ) -> Result<(), CoreError> {
        for t in trajs {
            self.insert(t, generation)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Arc<Trajectory>> {
        self.entries.iter().map(|(t, _)| t)
    }

    pub fn generation_of(&self, id: TrajectoryId) -> Option<u32> {
        self.entries
            .iter()
            .find(|(t, _)| t.id == id)
            .map(|&(_, g)| g)
    }

    pub fn get(&self, id: TrajectoryId) -> Option<&Arc<Trajectory>> {
        self.entries.iter().find(|(t, _)| t.id == id).map(|(t, _)| t)
    }

    /// One full-coverage fragment per trajectory in insertion order.
    pub fn full_fragments(&self) -> Vec<Fragment> {
        self.trajectories().map(Fragment::full).collect()
    }
}

/// Writes trajectories as line-oriented JSON, one trajectory per line.
pub fn write_trajectories<W: Write>(
    out: &mut W,
    trajs: impl IntoIterator<Item = impl AsRef<Trajectory>>,
) -> Result<(), CoreError> {
    for t in trajs {
        let line = serde_json::to_string(t.as_ref()).map_err(|e| CoreError::Serde(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| CoreError::Io(e.to_string()))?;
    }
    Ok(())
}

/// Reads trajectories from line-oriented JSON, validating chain invariants.
pub fn read_trajectories<R: BufRead>(input: R) -> Result<Vec<Arc<Trajectory>>, CoreError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line.map_err(|e| CoreError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: Trajectory =
            serde_json::from_str(&line).map_err(|e| CoreError::Serde(e.to_string()))?;
        let validated = Trajectory::new(raw.id, raw.transitions, raw.source)?;
        out.push(Arc::new(validated));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Chained trajectory whose state k is the 1-dim vector [k].
    pub(crate) fn line_trajectory(id: u64, len: usize) -> Arc<Trajectory> {
        let transitions = (0..len)
            .map(|k| Transition::new(vec![k as f64], 0, vec![k as f64 + 1.0]))
            .collect();
        Arc::new(Trajectory::new(TrajectoryId(id), transitions, Source::Agent).unwrap())
    }

    #[test]
    fn fragment_covers_whole_trajectory() {
        let t = line_trajectory(0, 10);
        let f = make_fragment(&t, 0, 10).unwrap();
        assert_eq!(f.len(), 10);
        assert_eq!(f.transitions().len(), 10);
        assert_eq!(f, Fragment::full(&t));
    }

    #[test]
    fn fragment_slices_middle_range() {
        let t = line_trajectory(0, 10);
        let f = make_fragment(&t, 3, 4).unwrap();
        assert_eq!(f.transitions()[0].state, vec![3.0]);
        assert_eq!(f.transitions()[3].state, vec![6.0]);
    }

    #[test]
    fn fragment_out_of_range_is_rejected() {
        let t = line_trajectory(0, 10);
        assert_eq!(
            make_fragment(&t, 8, 4),
            Err(CoreError::OutOfRange {
                start: 8,
                len: 4,
                traj_len: 10
            })
        );
        assert_eq!(make_fragment(&t, 0, 0), Err(CoreError::EmptyFragment));
    }

    #[test]
    fn strict_subfragment_requires_containment_and_inequality() {
        let t1 = line_trajectory(1, 10);
        let t2 = line_trajectory(2, 10);
        let inner = make_fragment(&t1, 3, 3).unwrap();
        let outer = make_fragment(&t1, 0, 10).unwrap();
        assert!(is_strict_subfragment(&inner, &outer));
        assert!(!is_strict_subfragment(&outer, &outer));
        assert!(!is_strict_subfragment(
            &make_fragment(&t1, 3, 3).unwrap(),
            &make_fragment(&t2, 0, 10).unwrap()
        ));
    }

    #[test]
    fn fragment_transitions_are_contiguous_slice_of_parent() {
        let t = line_trajectory(7, 12);
        for start in 0..12 {
            for len in 1..=(12 - start) {
                let f = make_fragment(&t, start, len).unwrap();
                assert_eq!(f.transitions(), &t.transitions[start..start + len]);
            }
        }
    }

    #[test]
    fn full_fragments_matches_brute_force() {
        let t1 = line_trajectory(1, 8);
        let t2 = line_trajectory(2, 8);
        let frags = vec![
            make_fragment(&t1, 0, 8).unwrap(),
            make_fragment(&t1, 2, 3).unwrap(),
            make_fragment(&t1, 0, 4).unwrap(),
            make_fragment(&t2, 1, 5).unwrap(),
            make_fragment(&t2, 1, 5).unwrap(),
            make_fragment(&t2, 2, 2).unwrap(),
        ];
        let maximal = full_fragments(&frags);
        // brute force: keep f iff no other fragment strictly contains it
        let expect: Vec<_> = frags
            .iter()
            .filter(|f| !frags.iter().any(|g| is_strict_subfragment(f, g)))
            .cloned()
            .collect();
        assert_eq!(maximal, expect);
        assert!(maximal.contains(&make_fragment(&t1, 0, 8).unwrap()));
        assert!(maximal.contains(&make_fragment(&t2, 1, 5).unwrap()));
        assert!(!maximal.contains(&make_fragment(&t1, 2, 3).unwrap()));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let transitions = vec![
            Transition::new(vec![0.0], 0, vec![1.0]),
            Transition::new(vec![2.0], 0, vec![3.0]),
        ];
        assert_eq!(
            Trajectory::new(TrajectoryId(0), transitions, Source::Random).unwrap_err(),
            CoreError::BrokenChain { index: 0 }
        );
    }

    #[test]
    fn pool_enforces_unique_ids_and_monotone_generations() {
        let mut pool = TrajectoryPool::new();
        let t1 = line_trajectory(1, 4);
        let t2 = line_trajectory(2, 4);
        pool.insert(Arc::clone(&t1), 0).unwrap();
        pool.insert(Arc::clone(&t2), 1).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.generation_of(TrajectoryId(2)), Some(1));
        assert_eq!(
            pool.insert(t1, 2).unwrap_err(),
            CoreError::DuplicateId(1)
        );
        let t3 = line_trajectory(3, 4);
        assert_eq!(
            pool.insert(t3, 0).unwrap_err(),
            CoreError::NonMonotoneGeneration { got: 0, latest: 1 }
        );
    }

    #[test]
    fn jsonl_round_trip_preserves_trajectories() {
        let trajs: Vec<_> = (0..3).map(|i| line_trajectory(i, 5)).collect();
        let mut buf = Vec::new();
        write_trajectories(&mut buf, trajs.iter()).unwrap();
        assert_eq!(buf.iter().filter(|&&b| b == b'\n').count(), 3);
        let back = read_trajectories(&buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in trajs.iter().zip(&back) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
    }
}
